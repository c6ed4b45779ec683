//! Capsule-segment template mesh with linear blend skinning.

use nalgebra::Vector3;

use super::skeleton::{Posed, Skeleton};
use crate::error::{MetroError, Result};
use crate::mesh::{Face, Point3};

/// Skinning weights per vertex: `(joint frame, weight)` pairs.
pub type SkinWeights = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleSpec {
    pub ring_vertices: usize,
    pub rings_per_bone: usize,
    /// Tube radius of the bone ending at each joint (root entry sizes the root disc).
    pub radii: Vec<f64>,
    /// Fraction of a bone over which weights blend into the neighbouring frame.
    pub blend: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkinnedTemplate {
    pub vertices: Vec<Point3>,
    pub faces: Vec<Face>,
    pub weights: SkinWeights,
    /// Vertex ring centered on each joint; the joint regressor averages it.
    pub joint_rings: Vec<Vec<usize>>,
}

fn ring_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let u = helper.cross(axis).normalize();
    let w = axis.cross(&u);
    (u, w)
}

fn push_ring(
    verts: &mut Vec<Point3>,
    center: Vector3<f64>,
    u: &Vector3<f64>,
    w: &Vector3<f64>,
    r: f64,
    s: usize,
) -> Vec<usize> {
    (0..s)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / s as f64;
            verts.push((center + r * (th.cos() * u + th.sin() * w)).into());
            verts.len() - 1
        })
        .collect()
}

/// One tube per bone plus a disc at the root.
pub fn build_capsule_template(skel: &Skeleton, spec: &CapsuleSpec) -> Result<SkinnedTemplate> {
    let k = skel.num_joints();
    let (s, l) = (spec.ring_vertices, spec.rings_per_bone);
    if s < 3 || l < 2 || spec.radii.len() != k || !(0.0..=0.5).contains(&spec.blend) {
        return Err(MetroError::Config("invalid capsule spec".into()));
    }
    let rest = skel.rest_positions();
    let root = skel.root();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut joint_rings = vec![Vec::new(); k];

    let center = Vector3::from(rest[root]);
    let ring = push_ring(&mut vertices, center, &Vector3::x(), &Vector3::z(), spec.radii[root], s);
    vertices.push(rest[root]);
    let hub = vertices.len() - 1;
    for i in 0..s {
        faces.push([hub, ring[i], ring[(i + 1) % s]]);
    }
    weights.extend(std::iter::repeat(vec![(root, 1.0)]).take(s + 1));
    joint_rings[root] = ring;

    for c in 0..k {
        let p = skel.parents[c];
        if p == c {
            continue;
        }
        let start = Vector3::from(rest[p]);
        let off = Vector3::from(rest[c]) - start;
        let len = off.norm();
        if len == 0.0 {
            return Err(MetroError::Validation(format!("bone into joint {c} has zero length")));
        }
        let (u, w) = ring_basis(&(off / len));
        let pp = skel.parents[p];
        let mut prev_ring: Option<Vec<usize>> = None;
        for i in 0..l {
            let t = i as f64 / (l - 1) as f64;
            let r = spec.radii[c] * (1.0 - 0.15 * t);
            let ring = push_ring(&mut vertices, start + t * off, &u, &w, r, s);
            let tau = spec.blend;
            let w_prev = if pp != p && tau > 0.0 {
                (0.5 * (1.0 - t / tau)).max(0.0)
            } else {
                0.0
            };
            let w_next = if tau > 0.0 {
                (0.5 * (t - (1.0 - tau)) / tau).max(0.0)
            } else {
                0.0
            };
            let mut row = vec![(p, 1.0 - w_prev - w_next)];
            if w_prev > 0.0 {
                row.push((pp, w_prev));
            }
            if w_next > 0.0 {
                row.push((c, w_next));
            }
            weights.extend(std::iter::repeat(row).take(s));
            if let Some(prev) = &prev_ring {
                for j in 0..s {
                    let (a, b) = (prev[j], prev[(j + 1) % s]);
                    let (c2, d) = (ring[j], ring[(j + 1) % s]);
                    faces.push([a, b, d]);
                    faces.push([a, d, c2]);
                }
            }
            if i == l - 1 {
                joint_rings[c] = ring.clone();
            }
            prev_ring = Some(ring);
        }
    }
    Ok(SkinnedTemplate {
        vertices,
        faces,
        weights,
        joint_rings,
    })
}

pub fn validate_weights(weights: &SkinWeights, num_joints: usize) -> Result<()> {
    for (i, row) in weights.iter().enumerate() {
        if row.is_empty() || row.len() > 4 {
            return Err(MetroError::Validation(format!(
                "vertex {i} has {} skinning influences (1..=4 allowed)",
                row.len()
            )));
        }
        if row.iter().any(|&(j, w)| j >= num_joints || w < 0.0 || !w.is_finite()) {
            return Err(MetroError::Validation(format!("vertex {i} has an invalid influence")));
        }
        let sum: f64 = row.iter().map(|&(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetroError::Validation(format!("vertex {i} weights sum to {sum}")));
        }
    }
    Ok(())
}

/// Linear blend skinning: each frame maps `x ↦ J_posed + scale·R·(x − J_rest)`.
pub fn skin_mesh(
    vertices: &[Point3],
    weights: &SkinWeights,
    rest_joints: &[Point3],
    posed: &Posed,
    scale: f64,
) -> Result<Vec<Point3>> {
    if weights.len() != vertices.len() {
        return Err(MetroError::dim("skin_mesh", &[vertices.len()], &[weights.len()]));
    }
    validate_weights(weights, rest_joints.len())?;
    Ok(vertices
        .iter()
        .zip(weights)
        .map(|(v, row)| {
            // Accumulated as a displacement so the rest pose reproduces `v` exactly.
            let x = Vector3::from(*v);
            let mut disp = Vector3::zeros();
            for &(j, w) in row {
                let rest = Vector3::from(rest_joints[j]);
                let local = x - rest;
                let moved = scale * (posed.rotations[j] * local) - local;
                disp += w * ((Vector3::from(posed.positions[j]) - rest) + moved);
            }
            (x + disp).into()
        })
        .collect())
}
