//! Deterministic artifact persistence: CSV matrices with 17-significant-digit
//! cells, vocabulary JSON, and the attention JSON-lines format.
//!
//! All files use '.' as the decimal separator and LF line endings regardless
//! of locale, so identical runs produce byte-identical artifacts.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::corpus::{TermUtteranceMatrix, Vocabulary};
use crate::correlation::CorrelationMatrices;
use crate::{CpmError, Result};

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| CpmError::Format {
        line,
        message: format!("invalid number {s:?} in {}", path.display()),
    })
}

/// Quote a CSV cell only when it needs quoting.
fn csv_escape(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Write a bare numeric matrix, one CSV row per matrix row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CpmError::io(path, e))
}

/// Read a bare numeric matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|cell| parse_f64(cell, path, idx + 1))
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(CpmError::Format {
            line: 0,
            message: format!("{} is empty", path.display()),
        });
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CpmError::Format {
            line: 0,
            message: format!("{} has ragged rows", path.display()),
        });
    }
    let nrows = rows.len();
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Term-utterance matrix CSV: header row of kept utterance column ids,
/// first column of terms.
pub fn write_tdm_csv(path: &Path, matrix: &TermUtteranceMatrix, vocab: &Vocabulary) -> Result<()> {
    if matrix.n_terms() != vocab.len() {
        return Err(CpmError::Shape(format!(
            "matrix has {} term rows, vocabulary {}",
            matrix.n_terms(),
            vocab.len()
        )));
    }
    let mut out = String::from("term");
    for id in &matrix.kept_utterance_ids {
        out.push(',');
        out.push_str(&id.to_string());
    }
    out.push('\n');
    for (i, term) in vocab.terms.iter().enumerate() {
        out.push_str(&csv_escape(term));
        for j in 0..matrix.n_utterances() {
            out.push(',');
            out.push_str(&format_f64(matrix.x[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CpmError::io(path, e))
}

/// Read a term-utterance CSV back into the matrix and its term order.
pub fn read_tdm_csv(path: &Path) -> Result<(TermUtteranceMatrix, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CpmError::Format {
        line: 0,
        message: format!("{} is empty", path.display()),
    })?;
    let kept: Result<Vec<usize>> = header
        .split(',')
        .skip(1)
        .map(|c| {
            c.parse::<usize>().map_err(|_| CpmError::Format {
                line: 1,
                message: format!("invalid utterance id {c:?}"),
            })
        })
        .collect();
    let kept = kept?;

    let mut terms = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells = split_csv_line(line);
        if cells.len() != kept.len() + 1 {
            return Err(CpmError::Format {
                line: idx + 1,
                message: format!(
                    "expected {} cells, got {}",
                    kept.len() + 1,
                    cells.len()
                ),
            });
        }
        terms.push(cells[0].clone());
        let row: Result<Vec<f64>> = cells[1..]
            .iter()
            .map(|c| parse_f64(c, path, idx + 1))
            .collect();
        rows.push(row?);
    }
    let n = rows.len();
    let m = kept.len();
    let x = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
    Ok((
        TermUtteranceMatrix {
            x,
            kept_utterance_ids: kept,
        },
        terms,
    ))
}

/// Minimal CSV field splitter honoring double-quote escaping.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if cur.is_empty() => quoted = true,
            ',' if !quoted => {
                cells.push(std::mem::take(&mut cur));
            }
            c => cur.push(c),
        }
    }
    cells.push(cur);
    cells
}

#[derive(serde::Serialize, serde::Deserialize)]
struct VocabFile {
    terms: Vec<String>,
    min_frequency: usize,
}

pub fn write_vocab_json(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let file = VocabFile {
        terms: vocab.terms.clone(),
        min_frequency: vocab.min_frequency,
    };
    let text = serde_json::to_string_pretty(&file).expect("vocab serializes");
    fs::write(path, text + "\n").map_err(|e| CpmError::io(path, e))
}

pub fn read_vocab_json(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    let file: VocabFile = serde_json::from_str(&text).map_err(|e| CpmError::Format {
        line: 0,
        message: format!("bad vocabulary file {}: {e}", path.display()),
    })?;
    let index = file
        .terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        terms: file.terms,
        index,
        min_frequency: file.min_frequency,
    })
}

/// One attention JSON line:
/// `{"utterance_id":..,"tokens":[..],"oov_mask":[..],"attention":[..],"fallback_rows":[..]}`
/// with the attention entries in row-major order at 17 significant digits.
pub fn attention_json_line(
    utterance_id: usize,
    tokens: &[String],
    matrices: &CorrelationMatrices,
) -> String {
    let mut out = String::from("{\"utterance_id\":");
    out.push_str(&utterance_id.to_string());
    out.push_str(",\"tokens\":[");
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(tok).expect("token serializes"));
    }
    out.push_str("],\"oov_mask\":[");
    for (i, id) in matrices.token_map.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(if id.is_none() { "true" } else { "false" });
    }
    out.push_str("],\"attention\":[");
    let l = matrices.attention.nrows();
    let mut first = true;
    for i in 0..l {
        for j in 0..l {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format_f64(matrices.attention[(i, j)]));
        }
    }
    out.push_str("],\"fallback_rows\":[");
    for (i, row) in matrices.fallback_rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&row.to_string());
    }
    out.push_str("]}");
    out
}
