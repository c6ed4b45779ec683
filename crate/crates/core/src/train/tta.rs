use crate::error::{MetroError, Result};
use crate::mesh::Point3;
use crate::metrics::procrustes_align;
use crate::model::{MetroModel, Retain};
use crate::synth::{Augmentation, Synthesizer, TrainingSample};

/// Aligns every mesh to the first with a similarity transform and averages vertexwise.
pub fn tta_average(meshes: &[Vec<Point3>]) -> Result<Vec<Point3>> {
    let first = meshes
        .first()
        .ok_or_else(|| MetroError::Validation("test-time augmentation needs at least one transform".into()))?;
    if meshes.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = vec![[0.0; 3]; first.len()];
    for m in meshes {
        if m.len() != first.len() {
            return Err(MetroError::dim("tta_average", &[first.len(), 3], &[m.len(), 3]));
        }
        let aligned = if m == first {
            m.clone()
        } else {
            procrustes_align(m, first)?.aligned
        };
        for (s, p) in sum.iter_mut().zip(&aligned) {
            for c in 0..3 {
                s[c] += p[c];
            }
        }
    }
    let n = meshes.len() as f64;
    Ok(sum.into_iter().map(|s| [s[0] / n, s[1] / n, s[2] / n]).collect())
}

fn is_identity(a: &Augmentation) -> bool {
    a.yaw == 0.0 && a.scale_jitter == 1.0
}

/// Full-resolution mesh averaged over re-rendered inputs, one per transform.
pub fn tta_infer(
    model: &MetroModel,
    synth: &Synthesizer,
    sample: &TrainingSample,
    transforms: &[Augmentation],
) -> Result<Vec<Point3>> {
    if transforms.is_empty() {
        return Err(MetroError::Validation(
            "test-time augmentation needs at least one transform".into(),
        ));
    }
    let meshes = transforms
        .iter()
        .map(|t| {
            let input = if is_identity(t) {
                sample.model_input()
            } else {
                synth.augment(sample, *t)?.model_input()
            };
            Ok(model.infer(&input, Retain::None)?.full_vertices3d)
        })
        .collect::<Result<Vec<_>>>()?;
    tta_average(&meshes)
}
