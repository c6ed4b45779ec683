//! Farthest-point coarsening with one-hot selection maps.

use std::collections::BTreeSet;

use super::{dist2, DownsampleMap, Face, Point3, TemplateMesh};
use crate::error::{MetroError, Result};

/// Greedy farthest-point sampling seeded at vertex 0. Returns indices in selection
/// order; ties resolve to the lowest index.
pub fn farthest_point_sample(points: &[Point3], count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut selected = Vec::with_capacity(count);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    loop {
        selected.push(current);
        if selected.len() == count {
            break;
        }
        let mut best = (-1.0, 0);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &points[current]);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    selected
}

/// Builds a coarse template by farthest-point sampling `target_m` vertices.
///
/// Coarse faces come from clustering every full vertex onto its nearest coarse
/// vertex; they are kept only when every coarse vertex ends up referenced.
pub fn build_coarse(full_vertices: &[Point3], faces: &[Face], target_m: usize) -> Result<TemplateMesh> {
    if target_m < 4 {
        return Err(MetroError::Validation(format!(
            "coarse target {target_m} must be at least 4"
        )));
    }
    if target_m > full_vertices.len() {
        return Err(MetroError::Validation(format!(
            "coarse target {target_m} exceeds {} full vertices",
            full_vertices.len()
        )));
    }
    let selected = farthest_point_sample(full_vertices, target_m);
    let coarse_vertices: Vec<Point3> = selected.iter().map(|&i| full_vertices[i]).collect();
    let downsample = DownsampleMap::one_hot(&selected, full_vertices.len())?;
    let mut mesh = TemplateMesh {
        full_vertices: full_vertices.to_vec(),
        faces: faces.to_vec(),
        coarse_vertices,
        coarse_faces: None,
        downsample,
    };
    let cluster = mesh.nearest_coarse();
    let mut seen = BTreeSet::new();
    let mut coarse_faces = Vec::new();
    for f in faces {
        let c = [cluster[f[0]], cluster[f[1]], cluster[f[2]]];
        if c[0] == c[1] || c[1] == c[2] || c[0] == c[2] {
            continue;
        }
        let mut key = c;
        key.sort_unstable();
        if seen.insert(key) {
            coarse_faces.push(c);
        }
    }
    let mut used = vec![false; target_m];
    coarse_faces.iter().flatten().for_each(|&i| used[i] = true);
    if used.iter().all(|&u| u) {
        mesh.coarse_faces = Some(coarse_faces);
    }
    mesh.validate()?;
    Ok(mesh)
}
