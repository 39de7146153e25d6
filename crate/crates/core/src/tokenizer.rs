//! Subword vocabulary learned from the gloss corpus with lossless
//! encode/decode over the training character set.
//!
//! Training is byte-pair-encoding style: start from characters (the final
//! character of each word carries an end-of-word marker), repeatedly merge
//! the most frequent adjacent pair until the target size is reached or no
//! pair occurs at least twice. Ties break toward the lexicographically
//! smallest merged string, so learning is deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Rendered in decoded text wherever an UNK id appears.
pub const UNK_PLACEHOLDER: &str = "\u{27e8}unk\u{27e9}"; // ⟨unk⟩

/// Appended to the final character of every word so decoding can restore
/// spaces. A private-use codepoint; it is stripped from input text before
/// segmentation so learned token strings can never collide with it.
const EOW: char = '\u{e000}';

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Learned subword inventory with reserved special ids and a bidirectional
/// token/id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
}

impl Vocabulary {
    /// BPE training over whitespace-split words of the corpus.
    pub fn learn<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        // word -> frequency, in deterministic order
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for gloss in corpus {
            for w in gloss.as_ref().split_whitespace() {
                let w: String = w.chars().filter(|&c| c != EOW).collect();
                if !w.is_empty() {
                    *word_freq.entry(w).or_insert(0) += 1;
                }
            }
        }

        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, &f)| (word_symbols(w), f))
            .collect();

        // Both the bare and the marker-suffixed variant of every character
        // go into the inventory, so any string over the training alphabet
        // encodes without UNK regardless of where characters fall in words.
        let mut inventory: BTreeSet<String> = BTreeSet::new();
        for w in word_freq.keys() {
            for c in w.chars() {
                inventory.insert(c.to_string());
                inventory.insert(format!("{c}{EOW}"));
            }
        }
        let base = NUM_SPECIALS + inventory.len();
        if target_size < base {
            return Err(Error::InvalidConfig(format!(
                "target_size {target_size} below character inventory ({base} incl. specials)"
            )));
        }

        // pair -> weighted count, kept up to date as merges rewrite words
        let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
        for (syms, f) in &words {
            count_pairs(syms, *f as i64, &mut pair_counts);
        }

        let mut merges: Vec<(String, String)> = Vec::new();
        let mut merged_tokens: Vec<String> = Vec::new();
        while base + merges.len() < target_size {
            let best = pair_counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb)
                        .then_with(|| merged(pb).cmp(&merged(pa)))
                        .then_with(|| pb.cmp(pa))
                })
                .map(|(p, _)| p.clone());
            let Some(pair) = best else { break };

            for (syms, f) in words.iter_mut() {
                if !has_pair(syms, &pair) {
                    continue;
                }
                count_pairs(syms, -(*f as i64), &mut pair_counts);
                *syms = apply_pair(syms, &pair);
                count_pairs(syms, *f as i64, &mut pair_counts);
            }
            pair_counts.retain(|_, c| *c > 0);
            merged_tokens.push(merged(&pair));
            merges.push(pair);
        }

        let mut tokens: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(inventory);
        tokens.extend(merged_tokens);
        Self::build(tokens, merges)
    }

    fn build(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        let merge_rank = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        Ok(Vocabulary { tokens, merges, index, merge_rank })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Token-id sequence BOS ... EOS. Characters outside the vocabulary map
    /// to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let word: String = word.chars().filter(|&c| c != EOW).collect();
            if word.is_empty() {
                continue;
            }
            let mut syms = word_symbols(&word);
            // repeatedly merge the leftmost occurrence of the lowest-rank
            // pair; equivalent to applying merges in learned order
            loop {
                let mut best: Option<(usize, usize)> = None; // (rank, position)
                for i in 0..syms.len().saturating_sub(1) {
                    let key = (syms[i].clone(), syms[i + 1].clone());
                    if let Some(&rank) = self.merge_rank.get(&key) {
                        if best.map_or(true, |(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((_, pos)) = best else { break };
                let joined = format!("{}{}", syms[pos], syms[pos + 1]);
                syms.splice(pos..pos + 2, [joined]);
            }
            for s in &syms {
                ids.push(self.id_of(s).unwrap_or(UNK));
            }
        }
        ids.push(EOS);
        ids
    }

    /// Concatenate subwords, restoring spaces at end-of-word markers and
    /// stripping special tokens. UNK renders as a fixed placeholder.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::Index(format!("unknown token id {id}")));
            }
            match id {
                PAD | BOS | EOS | MASK => continue,
                UNK => current.push_str(UNK_PLACEHOLDER),
                _ => {
                    let tok = &self.tokens[id as usize];
                    if let Some(stripped) = tok.strip_suffix(EOW) {
                        current.push_str(stripped);
                        words.push(std::mem::take(&mut current));
                    } else {
                        current.push_str(tok);
                    }
                }
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            specials: SPECIAL_TOKENS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let file: VocabFile = serde_json::from_slice(&bytes)?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            match file.specials.get(*s) {
                Some(&id) if id as usize == i => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "vocabulary file missing special {s:?} at id {i}"
                    )))
                }
            }
            if file.tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                return Err(Error::InvalidInput(format!(
                    "token slot {i} must hold special {s:?}"
                )));
            }
        }
        Self::build(file.tokens, file.merges)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{EOW}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merged(pair: &(String, String)) -> String {
    format!("{}{}", pair.0, pair.1)
}

fn count_pairs(syms: &[String], weight: i64, counts: &mut HashMap<(String, String), i64>) {
    for w in syms.windows(2) {
        *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += weight;
    }
}

fn has_pair(syms: &[String], pair: &(String, String)) -> bool {
    syms.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1)
}

/// Left-to-right single pass replacing adjacent occurrences of `pair`.
fn apply_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged(pair));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}
