//! Word vectors from the vertex matrix, per-utterance word-word correlation
//! matrices, and the row-stochastic attention matrices derived from them.

use nalgebra::DMatrix;

use crate::corpus::Vocabulary;
use crate::mvsa::SimplexModel;
use crate::{CpmError, Result};

/// Rows of the vertex matrix V: row i is term i's affinity to each vertex.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    /// N x K, row order = vocabulary order.
    pub vectors: DMatrix<f64>,
    /// Terms whose vector is (numerically) zero; they carry no affinity claim.
    pub zero_rows: Vec<bool>,
}

impl WordVectorTable {
    pub fn n_terms(&self) -> usize {
        self.vectors.nrows()
    }
}

/// Extract the word vector table from a fitted model.
pub fn word_vectors(model: &SimplexModel) -> WordVectorTable {
    let vectors = model.v.clone();
    let zero_rows = (0..vectors.nrows())
        .map(|i| vectors.row(i).norm() <= 1e-12)
        .collect();
    WordVectorTable { vectors, zero_rows }
}

/// Per-utterance correlation matrices and the derived attention matrix.
#[derive(Debug, Clone)]
pub struct CorrelationMatrices {
    /// L x L cosine similarities of the token word vectors; symmetric,
    /// unit diagonal.
    pub m_plain: DMatrix<f64>,
    /// Contextual correlation; not symmetric in general.
    pub m_context: DMatrix<f64>,
    /// Row-stochastic attention: negatives zeroed, rows renormalized.
    pub attention: DMatrix<f64>,
    /// Token position -> vocabulary id; None marks out-of-vocabulary tokens.
    pub token_map: Vec<Option<usize>>,
    /// Rows that zeroed out entirely and fell back to the uniform distribution.
    pub fallback_rows: Vec<usize>,
}

/// Map tokens to vocabulary ids; OOV positions become None.
pub fn token_vector_ids(tokens: &[String], vocab: &Vocabulary) -> Vec<Option<usize>> {
    tokens.iter().map(|t| vocab.id(t)).collect()
}

/// Cosine-similarity matrix of the utterance tokens' word vectors.
///
/// Out-of-vocabulary tokens and zero word vectors contribute no affinity:
/// 1 on the diagonal, 0 off it. The result is exactly symmetric.
pub fn correlation_matrix(
    tokens: &[String],
    table: &WordVectorTable,
    vocab: &Vocabulary,
) -> Result<(DMatrix<f64>, Vec<Option<usize>>)> {
    if table.n_terms() != vocab.len() {
        return Err(CpmError::Shape(format!(
            "word vector table has {} rows but vocabulary has {}",
            table.n_terms(),
            vocab.len()
        )));
    }
    let token_map = token_vector_ids(tokens, vocab);
    let l = tokens.len();
    let mut m = DMatrix::zeros(l, l);

    // a position resolves to a usable vector only if in-vocabulary and nonzero
    let usable: Vec<Option<usize>> = token_map
        .iter()
        .map(|&id| id.filter(|&i| !table.zero_rows[i]))
        .collect();
    let norms: Vec<f64> = usable
        .iter()
        .map(|&id| id.map_or(0.0, |i| table.vectors.row(i).norm()))
        .collect();

    for i in 0..l {
        m[(i, i)] = 1.0;
        for j in (i + 1)..l {
            let value = match (usable[i], usable[j]) {
                (Some(a), Some(b)) => {
                    table.vectors.row(a).dot(&table.vectors.row(b)) / (norms[i] * norms[j])
                }
                _ => 0.0,
            };
            m[(i, j)] = value;
            m[(j, i)] = value;
        }
    }
    Ok((m, token_map))
}

/// Contextual correlation with a window of three: each entry adds the
/// immediate predecessor and successor rows, weighted by their correlation
/// with the target position. Boundary positions drop the missing neighbor.
pub fn contextual_correlation(m_plain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m_plain.nrows() != m_plain.ncols() {
        return Err(CpmError::Shape(format!(
            "correlation matrix must be square, got {}x{}",
            m_plain.nrows(),
            m_plain.ncols()
        )));
    }
    let l = m_plain.nrows();
    let mut mc = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            let mut v = m_plain[(i, j)];
            if i >= 1 {
                v += m_plain[(i - 1, i)] * m_plain[(i - 1, j)];
            }
            if i + 1 < l {
                v += m_plain[(i + 1, i)] * m_plain[(i + 1, j)];
            }
            mc[(i, j)] = v;
        }
    }
    Ok(mc)
}

/// Zero out negative correlations and renormalize each row to sum one.
/// Rows that zero out entirely fall back to the uniform distribution and are
/// reported in the second return value.
pub fn attention_matrix(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let l = m.nrows();
    let mut att = m.map(|v| if v < 0.0 { 0.0 } else { v });
    let mut fallback = Vec::new();
    for i in 0..l {
        let sum: f64 = att.row(i).sum();
        if sum > 0.0 {
            for j in 0..l {
                att[(i, j)] /= sum;
            }
        } else {
            fallback.push(i);
            for j in 0..l {
                att[(i, j)] = 1.0 / l as f64;
            }
        }
    }
    (att, fallback)
}

/// Full per-utterance computation. With `contextual` false the attention is
/// derived from the plain correlation matrix instead of the contextual one.
pub fn correlate_utterance(
    tokens: &[String],
    table: &WordVectorTable,
    vocab: &Vocabulary,
    contextual: bool,
) -> Result<CorrelationMatrices> {
    let (m_plain, token_map) = correlation_matrix(tokens, table, vocab)?;
    let m_context = contextual_correlation(&m_plain)?;
    let source = if contextual { &m_context } else { &m_plain };
    let (attention, fallback_rows) = attention_matrix(source);
    Ok(CorrelationMatrices {
        m_plain,
        m_context,
        attention,
        token_map,
        fallback_rows,
    })
}
