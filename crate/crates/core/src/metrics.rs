//! Evaluation metrics. Inputs are in meters, reported errors in millimeters.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MetroError, Result};
use crate::mesh::{dist2, Point3};

pub const MM_PER_M: f64 = 1000.0;

/// F-score thresholds reported in [`MetricReport`], in millimeters.
pub const F_THRESHOLDS_MM: [f64; 2] = [5.0, 15.0];

/// Similarity transform `q ≈ s·R·p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
        }
        out
    }

    pub fn apply_all(&self, pts: &[Point3]) -> Vec<Point3> {
        pts.iter().map(|p| self.apply(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub transform: Similarity,
    pub aligned: Vec<Point3>,
}

fn centroid(pts: &[Point3]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::from(*p);
    }
    c / pts.len() as f64
}

/// Least-squares similarity aligning `p` onto `q`, restricted to proper rotations.
pub fn procrustes_align(p: &[Point3], q: &[Point3]) -> Result<Alignment> {
    if p.len() != q.len() {
        return Err(MetroError::dim("procrustes", &[p.len(), 3], &[q.len(), 3]));
    }
    if p.len() < 3 {
        return Err(MetroError::Alignment(format!(
            "need at least 3 points, got {}",
            p.len()
        )));
    }
    let (mp, mq) = (centroid(p), centroid(q));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(q) {
        let da = Vector3::from(*a) - mp;
        let db = Vector3::from(*b) - mq;
        cov += db * da.transpose();
        var_p += da.norm_squared();
    }
    if !(var_p > 1e-300) || !var_p.is_finite() {
        return Err(MetroError::Alignment("source points are coincident".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let s = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_p;
    let t = mq - s * r * mp;
    let transform = Similarity {
        scale: s,
        rotation: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        translation: [t.x, t.y, t.z],
    };
    let aligned = transform.apply_all(p);
    Ok(Alignment { transform, aligned })
}

fn check_pair(pred: &[Point3], gt: &[Point3]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetroError::dim("metric", &[pred.len(), 3], &[gt.len(), 3]));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding points, in millimeters.
pub fn mean_point_error(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred.iter().zip(gt).map(|(a, b)| dist2(a, b).sqrt()).sum();
    Ok(MM_PER_M * total / pred.len() as f64)
}

pub fn mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    mean_point_error(pred, gt)
}

pub fn pa_mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred == gt {
        return Ok(0.0);
    }
    let a = procrustes_align(pred, gt)?;
    mean_point_error(&a.aligned, gt)
}

pub fn mpve(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    mean_point_error(pred, gt)
}

/// Translates every point so that `pts[root]` sits at the origin.
pub fn root_centered(pts: &[Point3], root: usize) -> Vec<Point3> {
    let r = pts[root];
    pts.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect()
}

fn nearest_dist(p: &Point3, set: &[Point3]) -> f64 {
    set.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt()
}

/// Harmonic mean of precision (predicted points within `threshold_mm` of some
/// ground-truth point) and recall (the converse).
pub fn f_score(pred: &[Point3], gt: &[Point3], threshold_mm: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetroError::Validation("f_score needs nonempty point sets".into()));
    }
    let thr = threshold_mm / MM_PER_M;
    let within =
        |a: &[Point3], b: &[Point3]| a.iter().filter(|p| nearest_dist(p, b) < thr).count() as f64 / a.len() as f64;
    let precision = within(pred, gt);
    let recall = within(gt, pred);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Errors in millimeters; F-scores at [`F_THRESHOLDS_MM`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
    pub f_scores: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn compute(
        pred_joints: &[Point3],
        gt_joints: &[Point3],
        pred_vertices: &[Point3],
        gt_vertices: &[Point3],
    ) -> Result<Self> {
        Ok(MetricReport {
            mpjpe: mpjpe(pred_joints, gt_joints)?,
            pa_mpjpe: pa_mpjpe(pred_joints, gt_joints)?,
            mpve: mpve(pred_vertices, gt_vertices)?,
            f_scores: F_THRESHOLDS_MM
                .iter()
                .map(|&t| f_score(pred_vertices, gt_vertices, t).map(|f| (t, f)))
                .collect::<Result<_>>()?,
        })
    }

    /// Field-wise mean, summed in order.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        let n = reports.len();
        if n == 0 {
            return Err(MetroError::Validation("no reports to average".into()));
        }
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let f_scores = reports[0]
            .f_scores
            .iter()
            .enumerate()
            .map(|(i, &(t, _))| (t, avg(&|r| r.f_scores[i].1)))
            .collect();
        Ok(MetricReport {
            mpjpe: avg(&|r| r.mpjpe),
            pa_mpjpe: avg(&|r| r.pa_mpjpe),
            mpve: avg(&|r| r.mpve),
            f_scores,
        })
    }

    pub fn csv_header(&self) -> String {
        let mut h = vec!["mpjpe".to_string(), "pa_mpjpe".into(), "mpve".into()];
        h.extend(self.f_scores.iter().map(|(t, _)| format!("f@{t}")));
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut v = vec![self.mpjpe, self.pa_mpjpe, self.mpve];
        v.extend(self.f_scores.iter().map(|&(_, f)| f));
        v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn is_finite(&self) -> bool {
        [self.mpjpe, self.pa_mpjpe, self.mpve]
            .iter()
            .chain(self.f_scores.iter().map(|(_, f)| f))
            .all(|x| x.is_finite())
    }
}
