//! Dense text matrices and topic listings.
//!
//! A topic matrix file is a one-line `K W` header followed by K rows of W
//! space-separated values. Values are written in Rust's shortest
//! round-trip float form, so save/load is lossless.

use std::fs;
use std::path::Path;

use asysvi::{Error, Result};
use ndarray::Array2;

pub fn save_matrix(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let (rows, cols) = matrix.dim();
    let mut out = String::new();
    out.push_str(&format!("{rows} {cols}\n"));
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "matrix file is empty, expected a `K W` header".into(),
    })?;
    let dims: Vec<usize> = header.split_whitespace().map(|t| t.parse().unwrap_or(0)).collect();
    let (rows, cols) = match dims.as_slice() {
        [r, c] if *r > 0 && *c > 0 => (*r, *c),
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected a `K W` header with positive sizes, got {header:?}"),
            });
        }
    };

    let mut values = Vec::with_capacity(rows * cols);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad matrix entry {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {cols} entries per row, got {}", row.len()),
            });
        }
        values.extend(row);
    }
    if values.len() != rows * cols {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header promises {rows}x{cols} entries, file holds {}",
                values.len()
            ),
        });
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })
}

/// K contiguous block topics over W words, each uniform on its own block.
/// Blocks partition the vocabulary, so every word belongs to exactly one
/// topic; widths differ by at most one when K does not divide W.
pub fn block_topics(topics: usize, vocab: usize) -> Result<Array2<f64>> {
    if topics == 0 || vocab < topics {
        return Err(Error::Config(format!(
            "cannot fit {topics} block topics into a vocabulary of {vocab}"
        )));
    }
    let mut beta = Array2::<f64>::zeros((topics, vocab));
    let base = vocab / topics;
    let extra = vocab % topics;
    let mut start = 0;
    for k in 0..topics {
        let width = base + usize::from(k < extra);
        for w in start..start + width {
            beta[[k, w]] = 1.0 / width as f64;
        }
        start += width;
    }
    Ok(beta)
}

/// Formats each topic's `top_n` highest-weight words with probabilities
/// normalized over the full row. Requests past the vocabulary size list
/// every word; ties break toward the lower word id.
pub fn render_topics(matrix: &Array2<f64>, vocab: &[String], top_n: usize) -> Result<String> {
    let (topics, width) = matrix.dim();
    if vocab.len() != width {
        return Err(Error::Config(format!(
            "topic matrix has {width} columns but the vocabulary has {} words",
            vocab.len()
        )));
    }
    let shown = top_n.min(width);
    let mut out = String::new();
    for k in 0..topics {
        let row = matrix.row(k);
        let total: f64 = row.sum();
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let words: Vec<String> = order[..shown]
            .iter()
            .map(|&w| format!("{} {:.6}", vocab[w], row[w] / total))
            .collect();
        out.push_str(&format!("topic {k}: {}\n", words.join("  ")));
    }
    Ok(out)
}
