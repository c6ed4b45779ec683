//! Template mesh, coarse/full resolution mapping and the joint regressor.

mod coarse;
mod obj;
mod regressor;

pub use coarse::{build_coarse, farthest_point_sample};
pub use obj::{format_obj, load_obj, parse_obj, save_obj, Face, Point3};
pub use regressor::JointRegressor;

use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-6;

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Sparse row-stochastic `M×M_full` map from full-resolution to coarse vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleMap {
    rows: Vec<Vec<(usize, f64)>>,
    num_full: usize,
}

impl DownsampleMap {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, num_full: usize) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|&(j, w)| j >= num_full || w < 0.0 || !w.is_finite()) {
                return Err(MetroError::Validation(format!(
                    "downsample row {i} has an out-of-range index or negative weight"
                )));
            }
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(MetroError::Validation(format!("downsample row {i} sums to {s}")));
            }
        }
        Ok(DownsampleMap { rows, num_full })
    }

    pub fn one_hot(selected: &[usize], num_full: usize) -> Result<Self> {
        DownsampleMap::new(selected.iter().map(|&j| vec![(j, 1.0)]).collect(), num_full)
    }

    pub fn num_coarse(&self) -> usize {
        self.rows.len()
    }

    pub fn num_full(&self) -> usize {
        self.num_full
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Source indices when every row is a one-hot selection.
    pub fn selected(&self) -> Option<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| match r.as_slice() {
                [(j, w)] if *w == 1.0 => Some(*j),
                _ => None,
            })
            .collect()
    }

    pub fn apply(&self, full: &[Point3]) -> Vec<Point3> {
        self.rows
            .iter()
            .map(|row| {
                let mut p = [0.0; 3];
                for &(j, w) in row {
                    for c in 0..3 {
                        p[c] += w * full[j][c];
                    }
                }
                p
            })
            .collect()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.rows.len(), self.num_full]);
        let n = self.num_full;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                t.data_mut()[i * n + j] += w;
            }
        }
        t
    }
}

/// Rest-pose template at full and coarse resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMesh {
    pub full_vertices: Vec<Point3>,
    pub faces: Vec<Face>,
    pub coarse_vertices: Vec<Point3>,
    pub coarse_faces: Option<Vec<Face>>,
    pub downsample: DownsampleMap,
}

impl TemplateMesh {
    pub fn num_full(&self) -> usize {
        self.full_vertices.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_vertices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nf = self.num_full();
        if self.num_coarse() > nf || self.num_coarse() == 0 {
            return Err(MetroError::Validation(format!(
                "coarse vertex count {} must be in 1..={nf}",
                self.num_coarse()
            )));
        }
        if self.downsample.num_full() != nf || self.downsample.num_coarse() != self.num_coarse() {
            return Err(MetroError::Validation("downsample map shape mismatch".into()));
        }
        if self.faces.iter().flatten().any(|&i| i >= nf) {
            return Err(MetroError::Validation("face index out of range".into()));
        }
        if let Some(cf) = &self.coarse_faces {
            let m = self.num_coarse();
            let mut used = vec![false; m];
            for &i in cf.iter().flatten() {
                if i >= m {
                    return Err(MetroError::Validation("coarse face index out of range".into()));
                }
                used[i] = true;
            }
            if let Some(i) = used.iter().position(|u| !u) {
                return Err(MetroError::Validation(format!(
                    "coarse vertex {i} is not referenced by any face"
                )));
            }
        }
        Ok(())
    }

    /// For every full vertex, the index of the nearest coarse vertex (ties → lowest index).
    pub fn nearest_coarse(&self) -> Vec<usize> {
        self.full_vertices
            .iter()
            .map(|v| {
                let mut best = (f64::INFINITY, 0);
                for (i, c) in self.coarse_vertices.iter().enumerate() {
                    let d = dist2(v, c);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
            .collect()
    }
}
