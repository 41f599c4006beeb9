//! Pretrained word vectors with a deterministic out-of-vocabulary policy.
//!
//! Unknown tokens map to a seeded pseudo-random *unit* vector rather than
//! zero: the cosine in the matching matrix divides by vector norms, and zero
//! vectors would poison whole rows.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Token -> dense vector map. Immutable after load.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov_seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize, oov_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid_config("embedding dim must be >= 1"));
        }
        Ok(EmbeddingTable { dim, vectors: HashMap::new(), oov_seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid_input(format!(
                "vector for {token:?} has length {}, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }

    /// Stored vector for a known token, or a deterministic pseudo-random unit
    /// vector for an unknown one. Never the zero vector.
    pub fn lookup(&self, token: &str) -> Cow<'_, [f64]> {
        match self.vectors.get(token) {
            Some(v) => Cow::Borrowed(v.as_slice()),
            None => Cow::Owned(self.oov_vector(token)),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    fn oov_vector(&self, token: &str) -> Vec<f64> {
        let seed = fnv1a64(token.as_bytes()) ^ self.oov_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// FNV-1a, stable across processes and platforms (DefaultHasher is not).
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parse whitespace-separated word vectors, one token per line, with an
/// optional "<count> <dim>" header. Duplicate tokens: last wins.
pub fn read_embeddings<R: BufRead>(reader: R, oov_seed: u64) -> Result<EmbeddingTable> {
    let mut dim: Option<usize> = None;
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut duplicates = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if lineno == 1 && rest.len() == 1 {
            // header line: both fields are integers
            if token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
        }
        let values: Vec<f64> = rest
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::invalid_input(format!("line {lineno}: bad float {s:?}"))
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::invalid_input(format!("line {lineno}: token with no values")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::invalid_input(format!(
                    "line {lineno}: expected {d} values, found {}",
                    values.len()
                )));
            }
            _ => {}
        }
        if vectors.insert(token.to_string(), values).is_some() {
            duplicates += 1;
        }
    }
    let Some(dim) = dim else {
        return Err(Error::invalid_input("embedding file contains no vectors"));
    };
    if duplicates > 0 {
        log::warn!("embedding file had {duplicates} duplicate tokens; last occurrence wins");
    }
    Ok(EmbeddingTable { dim, vectors, oov_seed })
}

pub fn load_embeddings(path: &Path, oov_seed: u64) -> Result<EmbeddingTable> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_embeddings(f, oov_seed)
}

/// Cosine similarity, clamped to [-1, 1]. Either vector with norm below
/// 1e-12 yields 0.0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = na.sqrt();
    let nb = nb.sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
