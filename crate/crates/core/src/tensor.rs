//! Dense f64 tensors in row-major layout plus the numerically careful
//! kernels the rest of the crate builds on.

use crate::error::{Error, Result};

/// Flat row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, validating that the shape is non-degenerate and
    /// matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Rows of a 2-d tensor (errors otherwise).
    pub fn rows(&self) -> Result<usize> {
        self.dims2().map(|(m, _)| m)
    }

    pub fn cols(&self) -> Result<usize> {
        self.dims2().map(|(_, n)| n)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::InvalidShape(format!(
                "expected 2-d tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidShape("no rows".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), n], data)
    }
}

// ── kernels ──────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::InvalidShape(format!(
            "matmul: inner dims differ ({ka} vs {kb})"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::InvalidShape(format!(
            "matmul_nt: inner dims differ ({ka} vs {kb})"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &b.data[j * kb..(j + 1) * kb];
            let mut s = 0.0;
            for p in 0..ka {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C[k,n] = A[m,k]^T @ B[m,n]
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, k) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if ma != mb {
        return Err(Error::InvalidShape(format!(
            "matmul_tn: leading dims differ ({ma} vs {mb})"
        )));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..ma {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// Row-wise softmax with per-row max subtraction so large logits cannot
/// overflow. Rows sum to 1 within 1e-12.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Smoothed target distribution puts `1 - smoothing` on the gold id and
/// `smoothing / (V-1)` everywhere else. Returns the mean cross-entropy over
/// positions where `keep` is true; pad positions are excluded via `keep`.
pub fn label_smoothed_cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    keep: &[bool],
    smoothing: f64,
) -> Result<f64> {
    let (sum, count) = cross_entropy_sum(logits, targets, keep, smoothing)?;
    if count == 0 {
        return Err(Error::InvalidInput(
            "no unmasked positions to score".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Summed (not averaged) smoothed cross-entropy plus the number of scored
/// positions. Shared by the standalone op and the graph node.
pub(crate) fn cross_entropy_sum(
    logits: &Tensor,
    targets: &[u32],
    keep: &[bool],
    smoothing: f64,
) -> Result<(f64, usize)> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t || keep.len() != t {
        return Err(Error::InvalidShape(format!(
            "{t} logit rows vs {} targets / {} mask entries",
            targets.len(),
            keep.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidInput(format!(
            "smoothing must be in [0,1), got {smoothing}"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..t {
        if !keep[i] {
            continue;
        }
        let gold = targets[i] as usize;
        if gold >= v {
            return Err(Error::Index(format!(
                "target id {gold} out of range for vocab {v}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut lse = 0.0;
        for &z in row {
            lse += (z - max).exp();
        }
        let lse = max + lse.ln();
        // loss = lse - sum_v q_v z_v with q the smoothed one-hot
        let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
        let mut dot = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let q = if j == gold { 1.0 - smoothing } else { off };
            dot += q * z;
        }
        sum += lse - dot;
        count += 1;
    }
    Ok((sum, count))
}

/// Gradient of the summed smoothed cross-entropy wrt the logits:
/// softmax(z) - q at kept positions, zero at masked ones.
pub(crate) fn cross_entropy_grad(
    logits: &Tensor,
    targets: &[u32],
    keep: &[bool],
    smoothing: f64,
) -> Tensor {
    let (t, v) = logits.dims2().expect("checked at forward");
    let probs = softmax_rows(logits).expect("checked at forward");
    let mut grad = vec![0.0; t * v];
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    for i in 0..t {
        if !keep[i] {
            continue;
        }
        let gold = targets[i] as usize;
        let prow = probs.row(i);
        let grow = &mut grad[i * v..(i + 1) * v];
        for j in 0..v {
            let q = if j == gold { 1.0 - smoothing } else { off };
            grow[j] = prow[j] - q;
        }
    }
    Tensor::new(vec![t, v], grad).expect("shape from logits")
}

/// Scale every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; returns the pre-clip global norm. A relative slack
/// of 1e-9 on the comparison keeps repeated application a no-op.
pub fn clip_grad_norm<'a, I>(grads: I, max_norm: f64) -> f64
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    let grads: Vec<&'a mut Tensor> = grads.into_iter().collect();
    let mut sq = 0.0;
    for g in &grads {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm * (1.0 + 1e-9) {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Row-wise layer normalization: per row, (x - mean) / sqrt(var + eps)
/// scaled by `gain` and shifted by `bias`.
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::InvalidShape(format!(
            "layer norm gain/bias width {} / {} vs row width {n}",
            gain.numel(),
            bias.numel()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(vec![m, n], out)
}
