//! Causal transformer decoder conditioned on a set of word embeddings
//! through a cross-attention sublayer.
//!
//! Block layout per layer, pre-norm residual: masked self-attention,
//! cross-attention over the embedding rows, feed-forward. In literal mode
//! the cross-attention is exactly softmax(H E^T / sqrt(d_h)) E with no
//! learned projections and a single head; projected mode adds learned
//! Q/K/V/O maps (multi-head) for when the embedding width differs from the
//! hidden width. When the conditioning is masked out the sublayer
//! contributes nothing but the residual passthrough.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossAttentionMode {
    /// Exactly softmax(H E^T / sqrt(d_h)) E; requires d_e == d_h.
    Literal,
    /// Learned multi-head Q/K/V/O projections mapping d_e into d_h.
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub cross_mode: CrossAttentionMode,
    /// Width of each conditioning embedding vector.
    pub d_e: usize,
}

impl ModelConfig {
    /// 3-layer, 8-head decoder over 256-wide hidden states, matching the
    /// 256-wide embedding inputs so literal cross-attention is well defined.
    pub fn paper(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_h: 256,
            layers: 3,
            heads: 8,
            d_ff: 1024,
            max_len,
            dropout: 0.1,
            cross_mode: CrossAttentionMode::Literal,
            d_e: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_h == 0
            || self.layers == 0
            || self.heads == 0
            || self.d_ff == 0
            || self.max_len == 0
            || self.d_e == 0
        {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_h {} not divisible by heads {}",
                self.d_h, self.heads
            )));
        }
        if self.cross_mode == CrossAttentionMode::Literal && self.d_e != self.d_h {
            return Err(Error::InvalidConfig(format!(
                "literal cross-attention needs d_e == d_h, got {} vs {}",
                self.d_e, self.d_h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Named vectors conditioning one entry. sgns and char are always present;
/// electra is available for some languages only.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    sgns: Vec<f64>,
    char_emb: Vec<f64>,
    electra: Option<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(sgns: Vec<f64>, char_emb: Vec<f64>, electra: Option<Vec<f64>>) -> Result<Self> {
        let width = sgns.len();
        if width == 0 {
            return Err(Error::InvalidShape("empty sgns vector".into()));
        }
        if char_emb.len() != width {
            return Err(Error::InvalidShape(format!(
                "char vector width {} differs from sgns width {width}",
                char_emb.len()
            )));
        }
        if let Some(e) = &electra {
            if e.len() != width {
                return Err(Error::InvalidShape(format!(
                    "electra vector width {} differs from sgns width {width}",
                    e.len()
                )));
            }
        }
        let finite = sgns.iter().chain(&char_emb).chain(electra.iter().flatten());
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("embedding vector has a non-finite value".into()));
        }
        Ok(EmbeddingSet { sgns, char_emb, electra })
    }

    pub fn width(&self) -> usize {
        self.sgns.len()
    }

    pub fn len(&self) -> usize {
        2 + usize::from(self.electra.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sgns(&self) -> &[f64] {
        &self.sgns
    }

    pub fn char_emb(&self) -> &[f64] {
        &self.char_emb
    }

    pub fn electra(&self) -> Option<&[f64]> {
        self.electra.as_deref()
    }

    /// Stack the present vectors as rows: sgns, char, then electra.
    pub fn to_matrix(&self) -> Tensor {
        let mut rows = vec![self.sgns.clone(), self.char_emb.clone()];
        if let Some(e) = &self.electra {
            rows.push(e.clone());
        }
        Tensor::from_rows(&rows).expect("widths validated at construction")
    }
}

/// Conditioning input to the decoder: an embedding set, or masked out.
#[derive(Debug, Clone, Copy)]
pub enum CrossInput<'a> {
    Zero,
    Set(&'a EmbeddingSet),
}

// ── parameters ───────────────────────────────────────────────────────

/// All decoder tensors, keyed by canonical names. Everything is trainable
/// except the sinusoidal position table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).expect("known parameter name")
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }
}

/// Deterministic initialization: scaled-uniform linear weights, unit-gain
/// norms, normally distributed token embeddings, sinusoidal positions.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams { tensors: BTreeMap::new() };

    let emb_std = (cfg.d_h as f64).powf(-0.5);
    let normal = Normal::new(0.0, emb_std).expect("valid std");
    let tok: Vec<f64> = (0..cfg.vocab_size * cfg.d_h)
        .map(|_| normal.sample(&mut rng))
        .collect();
    p.insert("tok_emb", Tensor::new(vec![cfg.vocab_size, cfg.d_h], tok)?.with_grad());
    p.insert("pos_table", sinusoidal_table(cfg.max_len, cfg.d_h));

    for layer in 0..cfg.layers {
        let lp = |suffix: &str| format!("layer{layer}.{suffix}");
        norm_pair(&mut p, &lp("attn.norm"), cfg.d_h);
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            p.insert(lp(name), xavier(&mut rng, cfg.d_h, cfg.d_h)?);
        }
        for name in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            p.insert(lp(name), Tensor::zeros(vec![cfg.d_h]).with_grad());
        }
        norm_pair(&mut p, &lp("cross.norm"), cfg.d_h);
        if cfg.cross_mode == CrossAttentionMode::Projected {
            p.insert(lp("cross.wq"), xavier(&mut rng, cfg.d_h, cfg.d_h)?);
            p.insert(lp("cross.wk"), xavier(&mut rng, cfg.d_e, cfg.d_h)?);
            p.insert(lp("cross.wv"), xavier(&mut rng, cfg.d_e, cfg.d_h)?);
            p.insert(lp("cross.wo"), xavier(&mut rng, cfg.d_h, cfg.d_h)?);
        }
        norm_pair(&mut p, &lp("ffn.norm"), cfg.d_h);
        p.insert(lp("ffn.w1"), xavier(&mut rng, cfg.d_h, cfg.d_ff)?);
        p.insert(lp("ffn.b1"), Tensor::zeros(vec![cfg.d_ff]).with_grad());
        p.insert(lp("ffn.w2"), xavier(&mut rng, cfg.d_ff, cfg.d_h)?);
        p.insert(lp("ffn.b2"), Tensor::zeros(vec![cfg.d_h]).with_grad());
    }

    norm_pair(&mut p, "final_norm", cfg.d_h);
    p.insert("out_proj.w", xavier(&mut rng, cfg.d_h, cfg.vocab_size)?);
    p.insert("out_proj.b", Tensor::zeros(vec![cfg.vocab_size]).with_grad());
    Ok(p)
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Ok(Tensor::new(vec![fan_in, fan_out], data)?.with_grad())
}

fn norm_pair(p: &mut ModelParams, stem: &str, width: usize) {
    p.insert(
        format!("{stem}.gain"),
        Tensor::new(vec![width], vec![1.0; width]).expect("width > 0").with_grad(),
    );
    p.insert(format!("{stem}.bias"), Tensor::zeros(vec![width]).with_grad());
}

fn sinusoidal_table(max_len: usize, d_h: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_h];
    for pos in 0..max_len {
        for j in 0..d_h {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d_h as f64);
            data[pos * d_h + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d_h], data).expect("positive dims")
}

// ── forward ──────────────────────────────────────────────────────────

/// Dropout state threaded through graph construction. `Off` leaves the
/// graph untouched, so evaluation paths cost nothing.
pub(crate) enum Dropout<'r> {
    Off,
    On { p: f64, rng: &'r mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { p, rng } => {
                if *p == 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - *p;
                let mask: Vec<f64> = (0..g.value(x).numel())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.mul_mask(x, mask)
            }
        }
    }
}

/// Parameter leaves registered on a graph, by canonical name.
pub(crate) struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub(crate) fn bind(g: &mut Graph, params: &ModelParams) -> Self {
        let map = params
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t.clone())))
            .collect();
        ParamNodes { map }
    }

    pub(crate) fn node(&self, name: &str) -> NodeId {
        self.map[name]
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Build the full decoder forward pass on `g`, returning the logits node
/// of shape [T, V]. `cond` is a leaf holding the stacked embedding rows,
/// or None when the conditioning is masked out.
pub(crate) fn forward_on_graph(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    input_ids: &[u32],
    cond: Option<NodeId>,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    if input_ids.is_empty() {
        return Err(Error::InvalidInput("empty input sequence".into()));
    }
    if input_ids.len() > cfg.max_len {
        return Err(Error::TooLong { len: input_ids.len(), max: cfg.max_len });
    }
    let t = input_ids.len();
    let dk = cfg.d_h / cfg.heads;

    let tok = g.embed_lookup(nodes.node("tok_emb"), input_ids)?;
    let positions: Vec<u32> = (0..t as u32).collect();
    let pos = g.embed_lookup(nodes.node("pos_table"), &positions)?;
    let mut x = g.add(tok, pos)?;

    for layer in 0..cfg.layers {
        let lp = |suffix: &str| format!("layer{layer}.{suffix}");

        // masked multi-head self-attention
        let xn = g.layer_norm(x, nodes.node(&lp("attn.norm.gain")), nodes.node(&lp("attn.norm.bias")))?;
        let q0 = g.matmul(xn, nodes.node(&lp("attn.wq")))?;
        let q = g.add_row(q0, nodes.node(&lp("attn.bq")))?;
        let k0 = g.matmul(xn, nodes.node(&lp("attn.wk")))?;
        let k = g.add_row(k0, nodes.node(&lp("attn.bk")))?;
        let v0 = g.matmul(xn, nodes.node(&lp("attn.wv")))?;
        let v = g.add_row(v0, nodes.node(&lp("attn.bv")))?;
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let masked = g.causal_mask(scaled)?;
            let weights = g.softmax_rows(masked)?;
            let weights = dropout.apply(g, weights)?;
            head_ctx.push(g.matmul(weights, vh)?);
        }
        let ctx = g.concat_cols(&head_ctx)?;
        let proj = g.matmul(ctx, nodes.node(&lp("attn.wo")))?;
        let attn_out = g.add_row(proj, nodes.node(&lp("attn.bo")))?;
        x = g.add(x, attn_out)?;

        // cross-attention over the embedding rows; masked-out conditioning
        // leaves x untouched (residual passthrough)
        if let Some(e) = cond {
            let xn = g.layer_norm(
                x,
                nodes.node(&lp("cross.norm.gain")),
                nodes.node(&lp("cross.norm.bias")),
            )?;
            let ctx = match cfg.cross_mode {
                CrossAttentionMode::Literal => {
                    let scores = g.matmul_nt(xn, e)?;
                    let scaled = g.scale(scores, 1.0 / (cfg.d_h as f64).sqrt());
                    let weights = g.softmax_rows(scaled)?;
                    g.matmul(weights, e)?
                }
                CrossAttentionMode::Projected => {
                    let q = g.matmul(xn, nodes.node(&lp("cross.wq")))?;
                    let k = g.matmul(e, nodes.node(&lp("cross.wk")))?;
                    let v = g.matmul(e, nodes.node(&lp("cross.wv")))?;
                    let mut head_ctx = Vec::with_capacity(cfg.heads);
                    for h in 0..cfg.heads {
                        let qh = g.slice_cols(q, h * dk, dk)?;
                        let kh = g.slice_cols(k, h * dk, dk)?;
                        let vh = g.slice_cols(v, h * dk, dk)?;
                        let scores = g.matmul_nt(qh, kh)?;
                        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
                        let weights = g.softmax_rows(scaled)?;
                        head_ctx.push(g.matmul(weights, vh)?);
                    }
                    let cat = g.concat_cols(&head_ctx)?;
                    g.matmul(cat, nodes.node(&lp("cross.wo")))?
                }
            };
            x = g.add(x, ctx)?;
        }

        // feed-forward
        let xn = g.layer_norm(x, nodes.node(&lp("ffn.norm.gain")), nodes.node(&lp("ffn.norm.bias")))?;
        let h0 = g.matmul(xn, nodes.node(&lp("ffn.w1")))?;
        let h1 = g.add_row(h0, nodes.node(&lp("ffn.b1")))?;
        let h2 = g.relu(h1);
        let h2 = dropout.apply(g, h2)?;
        let h3 = g.matmul(h2, nodes.node(&lp("ffn.w2")))?;
        let ffn_out = g.add_row(h3, nodes.node(&lp("ffn.b2")))?;
        x = g.add(x, ffn_out)?;
    }

    let xn = g.layer_norm(x, nodes.node("final_norm.gain"), nodes.node("final_norm.bias"))?;
    let logits = g.matmul(xn, nodes.node("out_proj.w"))?;
    g.add_row(logits, nodes.node("out_proj.b"))
}

/// Register a conditioning leaf for an entry: the stacked embedding matrix,
/// or None for the masked case.
pub(crate) fn bind_cross_input(
    g: &mut Graph,
    cfg: &ModelConfig,
    cond: CrossInput,
) -> Result<Option<NodeId>> {
    match cond {
        CrossInput::Zero => Ok(None),
        CrossInput::Set(set) => {
            if set.width() != cfg.d_e {
                return Err(Error::InvalidShape(format!(
                    "embedding width {} does not match configured d_e {}",
                    set.width(),
                    cfg.d_e
                )));
            }
            Ok(Some(g.leaf(set.to_matrix())))
        }
    }
}

/// Evaluation-mode forward pass: logits [T, V] for one input sequence.
pub fn decoder_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    input_ids: &[u32],
    cond: CrossInput,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = ParamNodes::bind(&mut g, params);
    let e = bind_cross_input(&mut g, cfg, cond)?;
    let logits = forward_on_graph(&mut g, &nodes, cfg, input_ids, e, &mut Dropout::Off)?;
    Ok(g.value(logits).clone())
}

/// Standalone single-head cross-attention, exactly
/// softmax(H E^T / sqrt(d_h)) E with the hidden width as d_h. `None`
/// denotes the masked case and returns the all-zero matrix: zero values
/// force a zero context. `e` stacks the conditioning vectors as rows.
pub fn cross_attention(h: &Tensor, e: Option<&Tensor>) -> Result<Tensor> {
    let (_, d_h) = h.dims2()?;
    match e {
        None => Ok(Tensor::zeros(h.shape().to_vec())),
        Some(em) => {
            let (_, d_e) = em.dims2()?;
            if d_e != d_h {
                return Err(Error::InvalidShape(format!(
                    "embedding width {d_e} vs hidden width {d_h}"
                )));
            }
            let scores = tensor::matmul_nt(h, em)?;
            let scale = 1.0 / (d_h as f64).sqrt();
            let scaled = Tensor::new(
                scores.shape().to_vec(),
                scores.data().iter().map(|v| v * scale).collect(),
            )?;
            let weights = tensor::softmax_rows(&scaled)?;
            tensor::matmul(&weights, em)
        }
    }
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    count: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: ModelConfig,
    vocab_path: String,
    payload: String,
    tensors: Vec<TensorRecord>,
}

const CHECKPOINT_FORMAT: &str = "camf-checkpoint-v1";

/// Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian f32
/// payload). Both writes go through a temp file and rename.
pub fn save_checkpoint(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab_path: &str,
    manifest_path: &Path,
) -> Result<()> {
    let payload_name = manifest_path
        .with_extension("bin")
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidInput("checkpoint path has no file name".into()))?;

    let mut records = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params.iter() {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            count: t.numel(),
            trainable: t.requires_grad,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: cfg.clone(),
        vocab_path: vocab_path.to_string(),
        payload: payload_name,
        tensors: records,
    };

    let payload_path = manifest_path.with_extension("bin");
    atomic_write(&payload_path, &payload)?;
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    atomic_write(manifest_path, &manifest_bytes)?;
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    /// As stored in the manifest, relative paths resolve against the
    /// manifest's directory.
    pub vocab_path: String,
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let payload_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let payload = std::fs::read(&payload_path)?;
    let mut tensors = BTreeMap::new();
    for rec in &manifest.tensors {
        let end = rec.offset + rec.count * 4;
        if end > payload.len() {
            return Err(Error::InvalidInput(format!(
                "payload truncated for tensor {:?}",
                rec.name
            )));
        }
        let data: Vec<f64> = payload[rec.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut t = Tensor::new(rec.shape.clone(), data)?;
        t.requires_grad = rec.trainable;
        tensors.insert(rec.name.clone(), t);
    }
    Ok(Checkpoint {
        params: ModelParams { tensors },
        config: manifest.config,
        vocab_path: manifest.vocab_path,
    })
}

/// Resolve a checkpoint's vocabulary path against its manifest location.
pub fn resolve_vocab_path(manifest_path: &Path, vocab_path: &str) -> PathBuf {
    let p = Path::new(vocab_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}
