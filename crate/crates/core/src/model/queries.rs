//! Query construction and masked vertex modeling.

use rand::seq::index::sample;
use rand::Rng;

use super::config::PositionalMode;
use crate::error::{MetroError, Result};
use crate::mesh::{JointRegressor, TemplateMesh};
use crate::tensor::Tensor;

/// Encoder input: one query per joint followed by one per coarse vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub joint_queries: Tensor,
    pub vertex_queries: Tensor,
    pub masked_indices: Vec<usize>,
    pub mask_token: Vec<f64>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.joint_queries.rows() + self.vertex_queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.joint_queries.cols()
    }

    /// Query `i` of the joint-then-vertex sequence.
    pub fn query(&self, i: usize) -> &[f64] {
        let k = self.joint_queries.rows();
        if i < k {
            self.joint_queries.row(i)
        } else {
            self.vertex_queries.row(i - k)
        }
    }
}

/// Root-mean-square magnitude of the template codes.
///
/// Raw coordinates are a few tenths of a meter (hands less), which leaves token
/// identity weak next to the image feature; rescaling fixes that for every preset.
pub const TEMPLATE_CODE_RMS: f64 = 3.0;

/// Rest-pose positions of the joints (`G·V_template`) followed by the coarse template
/// vertices, uniformly scaled to [`TEMPLATE_CODE_RMS`].
pub fn template_codes(mesh: &TemplateMesh, regressor: &JointRegressor) -> Result<Tensor> {
    let mut pts = regressor.regress(&mesh.full_vertices)?;
    pts.extend_from_slice(&mesh.coarse_vertices);
    let rms = (pts.iter().flatten().map(|v| v * v).sum::<f64>() / (3 * pts.len()) as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(MetroError::Numeric("degenerate template for positional codes".into()));
    }
    let k = TEMPLATE_CODE_RMS / rms;
    let scaled: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect();
    Ok(Tensor::from_points(&scaled))
}

/// Three-value sinusoidal index code: `(sin i, cos i, sin(i / 10000^(2/3)))`.
pub fn sinusoidal_codes(n: usize) -> Tensor {
    let slow = 10000f64.powf(2.0 / 3.0);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let p = i as f64;
            [p.sin(), p.cos(), (p / slow).sin()]
        })
        .collect();
    Tensor::from_points(&pts)
}

pub fn positional_codes(mode: PositionalMode, mesh: &TemplateMesh, regressor: &JointRegressor) -> Result<Tensor> {
    match mode {
        PositionalMode::TemplateCoords => template_codes(mesh, regressor),
        PositionalMode::Sinusoidal => Ok(sinusoidal_codes(regressor.num_joints() + mesh.num_coarse())),
    }
}

/// Draws a masking fraction `f ~ U(0, max_fraction)` and then `⌈f·n⌉` distinct
/// token indices (capped at `⌊max_fraction·n⌋`), returned sorted.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, max_fraction: f64) -> Vec<usize> {
    if max_fraction <= 0.0 || n == 0 {
        return Vec::new();
    }
    let f: f64 = rng.gen_range(0.0..max_fraction);
    let cap = (max_fraction * n as f64).floor() as usize;
    let count = ((f * n as f64).ceil() as usize).min(cap);
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Concatenates `x` with each positional code; masked queries become `mask_token`.
pub fn assemble_queries(
    x: &[f64],
    codes: &Tensor,
    num_joints: usize,
    mask_token: &[f64],
    masked: &[usize],
) -> Result<QuerySet> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MetroError::Numeric("image feature has non-finite entries".into()));
    }
    let width = x.len() + 3;
    if mask_token.len() != width {
        return Err(MetroError::dim("build_queries", &[width], &[mask_token.len()]));
    }
    let n = codes.rows();
    let mut flags = vec![false; n];
    for &m in masked {
        if m >= n {
            return Err(MetroError::Validation(format!("masked index {m} out of range")));
        }
        flags[m] = true;
    }
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        if flags[i] {
            data.extend_from_slice(mask_token);
        } else {
            data.extend_from_slice(x);
            data.extend_from_slice(codes.row(i));
        }
    }
    let (jd, vd) = data.split_at(num_joints * width);
    Ok(QuerySet {
        joint_queries: Tensor::matrix(num_joints, width, jd.to_vec())?,
        vertex_queries: Tensor::matrix(n - num_joints, width, vd.to_vec())?,
        masked_indices: masked.to_vec(),
        mask_token: mask_token.to_vec(),
    })
}

/// Builds the `K+M` queries for feature `x`, masking a random subset.
#[allow(clippy::too_many_arguments)]
pub fn build_queries<R: Rng + ?Sized>(
    x: &[f64],
    mesh: &TemplateMesh,
    regressor: &JointRegressor,
    mode: PositionalMode,
    mask_token: &[f64],
    rng: &mut R,
    mvm_max_fraction: f64,
) -> Result<QuerySet> {
    let codes = positional_codes(mode, mesh, regressor)?;
    let masked = sample_mask(rng, codes.rows(), mvm_max_fraction);
    assemble_queries(x, &codes, regressor.num_joints(), mask_token, &masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_coarse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_assets(n_full: usize, m: usize, k: usize) -> (TemplateMesh, JointRegressor) {
        let pts: Vec<[f64; 3]> = (0..n_full)
            .map(|i| {
                let t = i as f64;
                [t.sin(), (0.7 * t).cos(), 0.01 * t]
            })
            .collect();
        let mesh = build_coarse(&pts, &[], m).unwrap();
        let mut g = Tensor::zeros(vec![k, n_full]);
        for j in 0..k {
            g.data_mut()[j * n_full + j] = 1.0;
        }
        (mesh, JointRegressor::new(g).unwrap())
    }

    #[test]
    fn unmasked_queries_concatenate_feature_and_template() {
        let (mesh, reg) = toy_assets(20, 6, 3);
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let tok = vec![9.0; 7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = build_queries(&x, &mesh, &reg, PositionalMode::TemplateCoords, &tok, &mut rng, 0.0).unwrap();
        assert!(qs.masked_indices.is_empty());
        assert_eq!(qs.len(), 9);
        let joints = reg.regress(&mesh.full_vertices).unwrap();
        let raw: Vec<[f64; 3]> = joints.iter().chain(&mesh.coarse_vertices).copied().collect();
        let rms = (raw.iter().flatten().map(|v| v * v).sum::<f64>() / 27.0).sqrt();
        let mut sq = 0.0;
        for (i, p) in raw.iter().enumerate() {
            let q = qs.query(i);
            assert_eq!(&q[..4], x.as_slice());
            for c in 0..3 {
                assert!((q[4 + c] - p[c] * TEMPLATE_CODE_RMS / rms).abs() < 1e-12);
                sq += q[4 + c] * q[4 + c];
            }
        }
        assert!(((sq / 27.0).sqrt() - TEMPLATE_CODE_RMS).abs() < 1e-12);
    }

    #[test]
    fn masked_queries_equal_the_mask_token() {
        let (mesh, reg) = toy_assets(30, 10, 4);
        let x = vec![1.0; 5];
        let tok: Vec<f64> = (0..8).map(f64::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qs = build_queries(&x, &mesh, &reg, PositionalMode::TemplateCoords, &tok, &mut rng, 1.0).unwrap();
        assert!(!qs.masked_indices.is_empty());
        for i in 0..qs.len() {
            let masked = qs.masked_indices.contains(&i);
            assert_eq!(qs.query(i) == tok.as_slice(), masked);
        }
    }

    #[test]
    fn mean_masked_fraction_is_half_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 445;
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let m = sample_mask(&mut rng, n, 0.3);
            assert!(m.len() as f64 <= 0.3 * n as f64);
            assert!(m.windows(2).all(|w| w[0] < w[1]));
            total += m.len() as f64 / n as f64;
        }
        let mean = total / draws as f64;
        assert!((mean - 0.15).abs() < 0.01, "mean masked fraction {mean}");
    }

    #[test]
    fn full_scale_query_width_and_length() {
        let (mesh, reg) = toy_assets(600, 431, 14);
        let x = vec![0.0; 2048];
        let tok = vec![0.0; 2051];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs = build_queries(&x, &mesh, &reg, PositionalMode::TemplateCoords, &tok, &mut rng, 0.3).unwrap();
        assert_eq!((qs.width(), qs.len()), (2051, 445));
    }

    #[test]
    fn sinusoidal_mode_uses_index_codes() {
        let (mesh, reg) = toy_assets(20, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = build_queries(
            &[0.0],
            &mesh,
            &reg,
            PositionalMode::Sinusoidal,
            &[0.0; 4],
            &mut rng,
            0.0,
        )
        .unwrap();
        let q5 = qs.query(5);
        assert_eq!(
            &q5[1..],
            &[5f64.sin(), 5f64.cos(), (5.0 / 10000f64.powf(2.0 / 3.0)).sin()]
        );
    }

    #[test]
    fn non_finite_feature_is_rejected() {
        let (mesh, reg) = toy_assets(20, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_queries(
            &[f64::NAN],
            &mesh,
            &reg,
            PositionalMode::TemplateCoords,
            &[0.0; 4],
            &mut rng,
            0.0,
        );
        assert!(matches!(err, Err(MetroError::Numeric(_))));
    }
}
