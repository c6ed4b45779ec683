//! Training losses and the weak-perspective projection.

use crate::autodiff::{Graph, Var};
use crate::error::{MetroError, Result};
use crate::mesh::{JointRegressor, Point3};
use crate::model::{CameraParams, ForwardVars};
use crate::tensor::Tensor;

/// Supervision for one sample. `alpha` gates the 3D terms, `beta` the 2D term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub vertices: Tensor,
    pub joints3d: Tensor,
    pub joints2d: Tensor,
    /// Ground truth at coarse resolution; adds an extra 3D vertex term when present.
    pub coarse_vertices: Option<Tensor>,
    pub alpha: bool,
    pub beta: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_v: Var,
    pub l_j: Var,
    pub l_j_reg: Var,
    pub l_j_proj: Var,
    pub l_v_coarse: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_j: f64,
    pub l_j_reg: f64,
    pub l_j_proj: f64,
    pub total: f64,
    pub alpha: bool,
    pub beta: bool,
}

impl LossBreakdown {
    pub fn read(g: &Graph, vars: &LossVars, alpha: bool, beta: bool) -> Self {
        let s = |v: Var| g.value(v).data()[0];
        LossBreakdown {
            l_v: s(vars.l_v),
            l_j: s(vars.l_j),
            l_j_reg: s(vars.l_j_reg),
            l_j_proj: s(vars.l_j_proj),
            total: s(vars.total),
            alpha,
            beta,
        }
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn loss_vertices(g: &mut Graph, v3d: Var, gt: Var) -> Result<Var> {
    g.l1_mean(v3d, gt)
}

pub fn loss_joints(g: &mut Graph, j3d: Var, gt: Var) -> Result<Var> {
    g.l1_mean(j3d, gt)
}

/// L1 between `G·V` and the ground-truth joints.
pub fn loss_joints_reg(g: &mut Graph, regressor: &JointRegressor, v3d: Var, gt: Var) -> Result<Var> {
    let j = regressor.regress_var(g, v3d)?;
    g.l1_mean(j, gt)
}

/// `s·(x, y) + t` per joint; `scale` is `1×1`, `trans` has two entries.
pub fn project_weak_perspective(g: &mut Graph, j3d: Var, scale: Var, trans: Var) -> Result<Var> {
    let xy = g.slice_cols(j3d, 0, 2)?;
    let scaled = g.scale_by(xy, scale)?;
    g.add_bias(scaled, trans)
}

pub fn loss_joints_proj(g: &mut Graph, j2d: Var, gt: Var) -> Result<Var> {
    g.l1_mean(j2d, gt)
}

/// `alpha·(l_v + l_j + l_j_reg) + beta·l_j_proj` over a model forward.
pub fn total_loss(
    g: &mut Graph,
    fv: &ForwardVars,
    regressor: &JointRegressor,
    targets: &LossTargets,
) -> Result<LossVars> {
    let gv = g.constant(targets.vertices.clone());
    let gj = g.constant(targets.joints3d.clone());
    let g2 = g.constant(targets.joints2d.clone());
    let l_v = loss_vertices(g, fv.full, gv)?;
    let l_j = loss_joints(g, fv.joints, gj)?;
    let l_j_reg = loss_joints_reg(g, regressor, fv.full, gj)?;
    let j2d = project_weak_perspective(g, fv.joints, fv.cam_scale, fv.cam_trans)?;
    let l_j_proj = loss_joints_proj(g, j2d, g2)?;
    let mut three_d = g.add(l_v, l_j)?;
    three_d = g.add(three_d, l_j_reg)?;
    let l_v_coarse = match &targets.coarse_vertices {
        Some(c) => {
            let gc = g.constant(c.clone());
            let l = g.l1_mean(fv.coarse, gc)?;
            three_d = g.add(three_d, l)?;
            Some(l)
        }
        None => None,
    };
    let a = g.scale(three_d, flag(targets.alpha));
    let b = g.scale(l_j_proj, flag(targets.beta));
    let total = g.add(a, b)?;
    Ok(LossVars {
        l_v,
        l_j,
        l_j_reg,
        l_j_proj,
        l_v_coarse,
        total,
    })
}

/// Plain-value weak-perspective projection.
pub fn project_points(points: &[Point3], cam: &CameraParams) -> Vec<[f64; 2]> {
    points.iter().map(|p| cam.project(p)).collect()
}

/// Mean over rows of the per-row L1 distance, on plain values.
pub fn l1_mean_rows(pred: &[f64], gt: &[f64], cols: usize) -> Result<f64> {
    if pred.len() != gt.len() || cols == 0 || pred.len() % cols != 0 || pred.is_empty() {
        return Err(MetroError::dim("l1_mean", &[pred.len()], &[gt.len()]));
    }
    let total: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / (pred.len() / cols) as f64)
}
