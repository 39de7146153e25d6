//! Loading, validating, and summarizing the gloss dataset: JSON arrays of
//! entries carrying an id, a gloss, and 256-wide sgns/char (and optionally
//! electra) embedding vectors. Gzip-compressed files are accepted by
//! extension.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingSet;

pub const EMBEDDING_WIDTH: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEntry {
    id: String,
    gloss: String,
    sgns: Vec<f64>,
    #[serde(rename = "char")]
    char_emb: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    electra: Option<Vec<f64>>,
}

/// One dataset record with its validated embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossEntry {
    pub id: String,
    pub gloss: String,
    pub embeddings: EmbeddingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub entries: Vec<GlossEntry>,
    pub language: Option<String>,
    pub role: SplitRole,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Some(true): electra required on every entry; Some(false): forbidden;
    /// None: accepted either way.
    pub expect_electra: Option<bool>,
    /// Override for synthetic fixtures; production data is 256-wide.
    pub vector_width: usize,
    pub role: SplitRole,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            expect_electra: None,
            vector_width: EMBEDDING_WIDTH,
            role: SplitRole::Train,
        }
    }
}

pub fn load_dataset(path: &Path, opts: LoadOptions) -> Result<DatasetSplit> {
    let bytes = read_maybe_gzip(path)?;
    let raw: Vec<RawEntry> = serde_json::from_slice(&bytes)?;
    let mut entries = Vec::with_capacity(raw.len());
    let mut seen: HashSet<String> = HashSet::with_capacity(raw.len());
    for r in raw {
        if !seen.insert(r.id.clone()) {
            return Err(Error::data(&r.id, "duplicate id"));
        }
        entries.push(validate_entry(r, &opts)?);
    }
    Ok(DatasetSplit { entries, language: None, role: opts.role })
}

fn validate_entry(r: RawEntry, opts: &LoadOptions) -> Result<GlossEntry> {
    if r.gloss.trim().is_empty() {
        return Err(Error::data(&r.id, "gloss is empty after trimming"));
    }
    check_vector(&r.id, "sgns", &r.sgns, opts.vector_width)?;
    check_vector(&r.id, "char", &r.char_emb, opts.vector_width)?;
    match (&r.electra, opts.expect_electra) {
        (None, Some(true)) => {
            return Err(Error::data(&r.id, "missing required electra vector"))
        }
        (Some(_), Some(false)) => {
            return Err(Error::data(&r.id, "unexpected electra vector"))
        }
        (Some(e), _) => check_vector(&r.id, "electra", e, opts.vector_width)?,
        (None, _) => {}
    }
    let embeddings = EmbeddingSet::new(r.sgns, r.char_emb, r.electra)
        .map_err(|e| Error::data(&r.id, e.to_string()))?;
    Ok(GlossEntry { id: r.id, gloss: r.gloss, embeddings })
}

fn check_vector(id: &str, name: &str, v: &[f64], width: usize) -> Result<()> {
    if v.len() != width {
        return Err(Error::data(
            id,
            format!("{name} vector has width {}, expected {width}", v.len()),
        ));
    }
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::data(
            id,
            format!("{name} vector has a non-finite value at index {pos}"),
        ));
    }
    Ok(())
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(file).read_to_end(&mut out)?;
        Ok(out)
    } else {
        let mut out = Vec::new();
        std::io::BufReader::new(file).read_to_end(&mut out)?;
        Ok(out)
    }
}

/// Re-serialize a split in the on-disk schema.
pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    let raw: Vec<RawEntry> = split
        .entries
        .iter()
        .map(|e| RawEntry {
            id: e.id.clone(),
            gloss: e.gloss.clone(),
            sgns: e.embeddings.sgns().to_vec(),
            char_emb: e.embeddings.char_emb().to_vec(),
            electra: e.embeddings.electra().map(|v| v.to_vec()),
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&raw)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub entries: usize,
    pub mean_gloss_tokens: f64,
    pub has_electra: bool,
}

/// Entry count, mean whitespace-token gloss length, electra availability
/// (true when every entry carries it).
pub fn stats(split: &DatasetSplit) -> Result<SplitStats> {
    if split.entries.is_empty() {
        return Err(Error::InvalidInput("empty split".into()));
    }
    let total_tokens: usize = split
        .entries
        .iter()
        .map(|e| e.gloss.split_whitespace().count())
        .sum();
    Ok(SplitStats {
        entries: split.entries.len(),
        mean_gloss_tokens: total_tokens as f64 / split.entries.len() as f64,
        has_electra: split.entries.iter().all(|e| e.embeddings.electra().is_some()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vecs(width: usize, fill: f64) -> Vec<f64> {
        vec![fill; width]
    }

    fn write_json(dir: &tempfile::TempDir, name: &str, value: &serde_json::Value) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, serde_json::to_vec(value).unwrap()).unwrap();
        path
    }

    fn opts8() -> LoadOptions {
        LoadOptions { vector_width: 8, ..Default::default() }
    }

    #[test]
    fn loads_entries_without_electra() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "es.json",
            &serde_json::json!([
                {"id": "es.1", "gloss": "una definición", "sgns": vecs(8, 0.1), "char": vecs(8, 0.2)},
                {"id": "es.2", "gloss": "otra cosa", "sgns": vecs(8, 0.3), "char": vecs(8, 0.4)}
            ]),
        );
        let split = load_dataset(&path, opts8()).unwrap();
        assert_eq!(split.entries.len(), 2);
        assert!(split.entries.iter().all(|e| e.embeddings.electra().is_none()));
    }

    #[test]
    fn rejects_wrong_vector_width_naming_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "bad.json",
            &serde_json::json!([
                {"id": "en.7", "gloss": "fine", "sgns": vecs(7, 0.0), "char": vecs(8, 0.0)}
            ]),
        );
        let err = load_dataset(&path, opts8()).unwrap_err();
        assert!(err.to_string().contains("en.7"), "{err}");
    }

    #[test]
    fn rejects_non_finite_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = vecs(8, 0.0);
        v[3] = f64::NAN;
        let path = write_json(
            &dir,
            "nan.json",
            &serde_json::json!([
                {"id": "x.1", "gloss": "ok", "sgns": v, "char": vecs(8, 0.0)}
            ]),
        );
        // serde_json parses NaN as null and fails; write a literal instead
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("null", "1e999")).unwrap();
        let err = load_dataset(&path, opts8()).unwrap_err();
        // either a parse failure or a finite-ness diagnostic, never a crash
        assert!(!err.to_string().is_empty());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "dup.json",
            &serde_json::json!([
                {"id": "same", "gloss": "a", "sgns": vecs(8, 0.0), "char": vecs(8, 0.0)},
                {"id": "same", "gloss": "b", "sgns": vecs(8, 0.0), "char": vecs(8, 0.0)}
            ]),
        );
        let err = load_dataset(&path, opts8()).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
        assert!(err.to_string().contains("same"));
    }

    #[test]
    fn enforces_electra_presence_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "mixed.json",
            &serde_json::json!([
                {"id": "a", "gloss": "x y", "sgns": vecs(8, 0.0), "char": vecs(8, 0.0)}
            ]),
        );
        let err = load_dataset(
            &path,
            LoadOptions { expect_electra: Some(true), vector_width: 8, ..Default::default() },
        )
        .unwrap_err();
        assert!(err.to_string().contains('a'));
    }

    #[test]
    fn stats_counts_and_mean_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "one.json",
            &serde_json::json!([
                {"id": "s", "gloss": "a b c", "sgns": vecs(8, 0.0), "char": vecs(8, 0.0)}
            ]),
        );
        let split = load_dataset(&path, opts8()).unwrap();
        let st = stats(&split).unwrap();
        assert_eq!(st.entries, 1);
        assert_eq!(st.mean_gloss_tokens, 3.0);
        assert!(!st.has_electra);
    }

    #[test]
    fn gzip_files_load_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let value = serde_json::json!([
            {"id": "gz", "gloss": "compressed entry", "sgns": vecs(8, 0.5), "char": vecs(8, 0.5)}
        ]);
        let path = dir.path().join("data.json.gz");
        let f = std::fs::File::create(&path).unwrap();
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(&serde_json::to_vec(&value).unwrap()).unwrap();
        enc.finish().unwrap();
        let split = load_dataset(&path, opts8()).unwrap();
        assert_eq!(split.entries.len(), 1);
    }

    #[test]
    fn load_save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "rt.json",
            &serde_json::json!([
                {"id": "r1", "gloss": "first one", "sgns": vecs(8, 0.25), "char": vecs(8, -0.5),
                 "electra": vecs(8, 0.75)},
                {"id": "r2", "gloss": "second one", "sgns": vecs(8, 1.0), "char": vecs(8, 2.0)}
            ]),
        );
        let split = load_dataset(&path, opts8()).unwrap();
        let out = dir.path().join("resaved.json");
        save_dataset(&split, &out).unwrap();
        let again = load_dataset(&out, opts8()).unwrap();
        assert_eq!(split.entries, again.entries);
    }

    #[test]
    fn empty_gloss_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            &dir,
            "empty.json",
            &serde_json::json!([
                {"id": "e", "gloss": "   ", "sgns": vecs(8, 0.0), "char": vecs(8, 0.0)}
            ]),
        );
        let err = load_dataset(&path, opts8()).unwrap_err();
        assert!(err.to_string().contains('e'));
    }
}
