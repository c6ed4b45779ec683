use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::obj::Point3;
use crate::autodiff::{kernels, Graph, Var};
use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-6;

/// Fixed `K×M_full` matrix mapping mesh vertices to joints. Rows sum to one, so
/// every joint is an affine combination of vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRegressor {
    matrix: Tensor,
}

impl JointRegressor {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(MetroError::Validation(format!(
                "joint regressor must be 2-D, got {:?}",
                matrix.shape()
            )));
        }
        for k in 0..matrix.rows() {
            let s: f64 = matrix.row(k).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || !s.is_finite() {
                return Err(MetroError::Validation(format!(
                    "joint regressor row {k} sums to {s}, expected 1"
                )));
            }
        }
        Ok(JointRegressor { matrix })
    }

    pub fn num_joints(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_vertices(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// `J = G·V` on plain coordinates, with the same kernel as [`Self::regress_var`].
    pub fn regress(&self, vertices: &[Point3]) -> Result<Vec<Point3>> {
        if vertices.len() != self.num_vertices() {
            return Err(MetroError::dim(
                "regress_joints",
                self.matrix.shape(),
                &[vertices.len(), 3],
            ));
        }
        let v: Vec<f64> = vertices.iter().flatten().copied().collect();
        let mut out = vec![0.0; 3 * self.num_joints()];
        kernels::gemm_nn(self.matrix.data(), &v, &mut out, self.num_joints(), vertices.len(), 3);
        Ok(out.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// `J = G·V` inside a graph, differentiable in `V`.
    pub fn regress_var(&self, g: &mut Graph, vertices: Var) -> Result<Var> {
        let gm = g.constant(self.matrix.clone());
        g.matmul(gm, vertices)
    }

    pub fn to_csv(&self) -> String {
        let (k, m) = (self.num_joints(), self.num_vertices());
        let mut out = format!("#rows={k} cols={m}\n");
        for r in 0..k {
            let row: Vec<String> = self.matrix.row(r).iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(MetroError::Parse {
            line: 1,
            msg: "empty regressor file".into(),
        })?;
        let (rows, cols) = parse_header(header)?;
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MetroError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != cols {
                return Err(MetroError::Parse {
                    line: i + 1,
                    msg: format!("expected {cols} columns, found {}", vals.len()),
                });
            }
            data.extend(vals);
            seen += 1;
        }
        if seen != rows {
            return Err(MetroError::Validation(format!(
                "regressor header declares {rows} rows, found {seen}"
            )));
        }
        JointRegressor::new(Tensor::matrix(rows, cols, data)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MetroError::io(path, e))?;
        JointRegressor::from_csv(&text)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| MetroError::io(path, e))
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || MetroError::Parse {
        line: 1,
        msg: format!("expected header `#rows=K cols=M`, got {line:?}"),
    };
    let rest = line.trim().strip_prefix('#').ok_or_else(bad)?;
    let mut rows = None;
    let mut cols = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("rows", v)) => rows = v.parse().ok(),
            Some(("cols", v)) => cols = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    match (rows, cols) {
        (Some(r), Some(c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(bad()),
    }
}
