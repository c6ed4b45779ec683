//! Aggregated self-attention maps and their export formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{MetroError, Result};
use crate::model::LayerAttention;

/// Row-stochastic `n×n` attention map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub tokens: usize,
    pub data: Vec<f64>,
}

/// Mean over samples and heads of one layer's attention (typically the last).
pub fn aggregate_attention(layers: &[&LayerAttention]) -> Result<AttentionMap> {
    let first = layers
        .first()
        .ok_or_else(|| MetroError::Validation("no attention maps to aggregate".into()))?;
    let n = first.tokens;
    let mut data = vec![0.0; n * n];
    let mut count = 0usize;
    for layer in layers {
        if layer.tokens != n {
            return Err(MetroError::dim(
                "aggregate_attention",
                &[n, n],
                &[layer.tokens, layer.tokens],
            ));
        }
        for h in 0..layer.heads {
            for (a, b) in data.iter_mut().zip(layer.head(h)) {
                *a += b;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    data.iter_mut().for_each(|x| *x *= inv);
    Ok(AttentionMap { tokens: n, data })
}

impl AttentionMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.tokens..(i + 1) * self.tokens]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.tokens + j]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.tokens)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Shortest round-trip decimal text, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.tokens {
            let row: Vec<String> = self.row(i).iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            for cell in line.split(',') {
                data.push(cell.trim().parse::<f64>().map_err(|e| MetroError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?);
            }
            rows += 1;
        }
        if rows == 0 || data.len() != rows * rows {
            return Err(MetroError::Validation(format!(
                "attention CSV is not square ({rows} rows, {} values)",
                data.len()
            )));
        }
        Ok(AttentionMap { tokens: rows, data })
    }

    /// 8-bit binary PGM; each row is scaled so its maximum maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.tokens;
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        for i in 0..n {
            let row = self.row(i);
            let max = row.iter().copied().fold(0.0, f64::max);
            out.extend(row.iter().map(|&x| {
                if max > 0.0 {
                    (x / max * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            }));
        }
        out
    }

    /// Attention paid by token `joint` to every token, as `index,weight` lines.
    pub fn joint_row_csv(&self, joint: usize) -> String {
        let mut out = String::from("token,weight\n");
        for (j, w) in self.row(joint).iter().enumerate() {
            let _ = writeln!(out, "{j},{w}");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| MetroError::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MetroError::io(path, e))?;
        AttentionMap::from_csv(&text)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| MetroError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(heads: usize, n: usize, data: Vec<f64>) -> LayerAttention {
        LayerAttention { heads, tokens: n, data }
    }

    #[test]
    fn single_head_is_returned_unchanged() {
        let a = layer(1, 2, vec![0.25, 0.75, 0.5, 0.5]);
        let m = aggregate_attention(&[&a]).unwrap();
        assert_eq!(m.data, a.data);
    }

    #[test]
    fn two_samples_average_exactly() {
        let a = layer(1, 2, vec![1.0, 0.0, 0.5, 0.5]);
        let b = layer(1, 2, vec![0.0, 1.0, 0.25, 0.75]);
        let m = aggregate_attention(&[&a, &b]).unwrap();
        assert_eq!(m.data, vec![0.5, 0.5, 0.375, 0.625]);
        assert!(m.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn heads_are_averaged() {
        let a = layer(2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(aggregate_attention(&[&a]).unwrap().data, vec![0.5; 4]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(aggregate_attention(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let m = AttentionMap {
            tokens: 2,
            data: vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0],
        };
        assert_eq!(AttentionMap::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn pgm_rows_are_max_normalized() {
        let m = AttentionMap {
            tokens: 2,
            data: vec![0.25, 0.75, 0.5, 0.5],
        };
        let pgm = m.to_pgm();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[85, 255, 255, 255]);
    }
}
