//! The matching matrix: pairwise cosine similarity between every user-document
//! token and every item-document token, padded to a fixed shape so the CNN
//! sees a constant input size.

use std::io::Write;

use crate::corpus::Document;
use crate::embeddings::{cosine, EmbeddingTable};
use crate::error::{Error, Result};

/// Dense row-major n_max x m_max matrix. Entries outside the valid region
/// (real tokens) are exactly 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    pub n_max: usize,
    pub m_max: usize,
    pub values: Vec<f64>,
    pub valid_rows: usize,
    pub valid_cols: usize,
}

impl MatchingMatrix {
    pub fn zeros(n_max: usize, m_max: usize) -> Self {
        MatchingMatrix {
            n_max,
            m_max,
            values: vec![0.0; n_max * m_max],
            valid_rows: 0,
            valid_cols: 0,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.m_max + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.m_max + col] = v;
    }

    /// Debug dump, one CSV row per matrix row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in 0..self.n_max {
            let line: Vec<String> = (0..self.m_max)
                .map(|col| format!("{}", self.get(row, col)))
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Build the cosine matching matrix for a (user, item) document pair.
///
/// Documents longer than the cap keep their first `n_max` (resp. `m_max`)
/// flattened tokens; shorter ones zero-pad. Both documents empty yields an
/// all-zero matrix with valid extents 0 and the caller decides the fallback.
pub fn build_matching_matrix(
    user_doc: &Document,
    item_doc: &Document,
    table: &EmbeddingTable,
    n_max: usize,
    m_max: usize,
) -> Result<MatchingMatrix> {
    if n_max == 0 || m_max == 0 {
        return Err(Error::invalid_config("matrix caps must be >= 1"));
    }
    let user_tokens = truncated(user_doc, n_max);
    let item_tokens = truncated(item_doc, m_max);

    let user_vecs: Vec<_> = user_tokens.iter().map(|t| table.lookup(t)).collect();
    let item_vecs: Vec<_> = item_tokens.iter().map(|t| table.lookup(t)).collect();

    let mut matrix = MatchingMatrix::zeros(n_max, m_max);
    matrix.valid_rows = user_vecs.len();
    matrix.valid_cols = item_vecs.len();
    for (p, u) in user_vecs.iter().enumerate() {
        for (q, v) in item_vecs.iter().enumerate() {
            matrix.set(p, q, cosine(u, v)?);
        }
    }
    Ok(matrix)
}

fn truncated(doc: &Document, cap: usize) -> Vec<String> {
    doc.flattened().into_iter().take(cap).map(str::to_string).collect()
}
