use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::lexicon::normalize;
use crate::numerics::stable_hash;

pub const DEFAULT_ENCODER_WIDTH: usize = 768;

/// Signed feature hashing over character n-grams, L2-normalized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEncoder {
    pub width: usize,
    pub seed: u64,
    pub min_n: usize,
    pub max_n: usize,
}

impl Default for HashingEncoder {
    fn default() -> Self {
        Self {
            width: DEFAULT_ENCODER_WIDTH,
            seed: 0,
            min_n: 3,
            max_n: 4,
        }
    }
}

impl HashingEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self {
            width,
            seed,
            ..Self::default()
        }
    }

    /// The n-grams hashed for `text` (lowercased, space padded).
    pub fn ngrams(&self, text: &str) -> Vec<String> {
        let padded: Vec<char> = format!(" {} ", normalize(text).to_lowercase()).chars().collect();
        let mut out = Vec::new();
        for n in self.min_n..=self.max_n {
            for w in padded.windows(n) {
                out.push(w.iter().collect());
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        if self.width == 0 {
            return v;
        }
        let salt = self.seed.to_le_bytes();
        for g in self.ngrams(text) {
            let mut bytes = salt.to_vec();
            bytes.extend_from_slice(g.as_bytes());
            let h = stable_hash(&bytes);
            let idx = (h % self.width as u64) as usize;
            v[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[derive(Deserialize)]
struct PrecomputedRow {
    text: String,
    vector: Vec<f64>,
}

/// Utterance feature extractor: hashing by default, or a table of
/// externally computed embeddings with hashing as the fallback.
#[derive(Clone, Debug, PartialEq)]
pub enum UtteranceEncoder {
    Hashing(HashingEncoder),
    Precomputed {
        table: HashMap<String, Vec<f64>>,
        fallback: HashingEncoder,
    },
}

impl Default for UtteranceEncoder {
    fn default() -> Self {
        Self::Hashing(HashingEncoder::default())
    }
}

impl UtteranceEncoder {
    pub fn width(&self) -> usize {
        match self {
            Self::Hashing(h) => h.width,
            Self::Precomputed { fallback, .. } => fallback.width,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        match self {
            Self::Hashing(h) => h.encode(text),
            Self::Precomputed { table, fallback } => table
                .get(&normalize(text))
                .cloned()
                .unwrap_or_else(|| fallback.encode(text)),
        }
    }

    /// Loads JSONL rows `{ "text": ..., "vector": [...] }`; every vector
    /// must have the fallback's width.
    pub fn load_precomputed(path: &Path, fallback: HashingEncoder) -> Result<Self, GraphError> {
        let f = std::fs::File::open(path).map_err(|e| GraphError::Encoder(format!("{}: {e}", path.display())))?;
        let mut table = HashMap::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| GraphError::Encoder(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: PrecomputedRow =
                serde_json::from_str(&line).map_err(|e| GraphError::Encoder(format!("line {}: {e}", n + 1)))?;
            if row.vector.len() != fallback.width {
                return Err(GraphError::Encoder(format!(
                    "line {}: vector width {} != {}",
                    n + 1,
                    row.vector.len(),
                    fallback.width
                )));
            }
            table.insert(normalize(&row.text), row.vector);
        }
        Ok(Self::Precomputed { table, fallback })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
