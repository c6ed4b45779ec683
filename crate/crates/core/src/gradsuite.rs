//! Finite-difference checks over every differentiable operation and the micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::losses::{project_weak_perspective, total_loss, LossTargets};
use crate::mesh::{build_coarse, JointRegressor, Point3, TemplateMesh};
use crate::model::{EncoderConfig, FeatureExtractor, MetroModel, ModelConfig, ModelInput, ParamVars};
use crate::tensor::Tensor;

/// Relative-error bound every check must meet.
pub const GRADCHECK_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.report.passes(GRADCHECK_TOL)
    }
}

/// Smallest model that still exercises every component: H=8, K=2, M=4, M_full=8,
/// one block of one layer with one head.
#[derive(Clone, Debug)]
pub struct MicroFixture {
    pub model: MetroModel,
    pub template: TemplateMesh,
    pub regressor: JointRegressor,
    pub input: ModelInput,
    pub targets: LossTargets,
    pub masked: Vec<usize>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

pub fn micro_fixture(seed: u64, extractor: FeatureExtractor) -> Result<MicroFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..8)
        .map(|i| {
            let t = i as f64;
            [0.3 * (1.3 * t).sin(), 0.1 * t, 0.2 * (0.7 * t).cos()]
        })
        .collect();
    let template = build_coarse(&pts, &[], 4)?;
    let mut g = Tensor::zeros(vec![2, 8]);
    for (j, row) in [[0usize, 1, 2], [4, 5, 7]].iter().enumerate() {
        for &v in row {
            g.data_mut()[j * 8 + v] = 1.0 / 3.0;
        }
    }
    let regressor = JointRegressor::new(g)?;
    let mut config = ModelConfig::new(2, 4, 8, EncoderConfig::from_widths(8, &[8], 1, 1)?);
    config.upsampler_hidden = 5;
    config.feature_extractor = extractor;
    let mut model = MetroModel::init(config, &template, &regressor, seed)?;
    // Randomize zero-initialized weights so every path carries gradient.
    for id in model.params().ids().collect::<Vec<_>>() {
        if model.params().entry(id).trainable {
            let shape = model.params().get(id).shape().to_vec();
            let mut t = rand_tensor(&mut rng, &shape);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            model.params_mut().set(id, t)?;
        }
    }
    let input = match extractor {
        FeatureExtractor::Precomputed => ModelInput::Feature(rand_tensor(&mut rng, &[8]).data().to_vec()),
        FeatureExtractor::TinyCnn { image_size } => ModelInput::Image {
            size: image_size,
            pixels: (0..image_size * image_size).map(|_| rng.gen_range(0.0..1.0)).collect(),
        },
    };
    let targets = LossTargets {
        vertices: rand_tensor(&mut rng, &[8, 3]),
        joints3d: rand_tensor(&mut rng, &[2, 3]),
        joints2d: rand_tensor(&mut rng, &[2, 2]),
        coarse_vertices: Some(rand_tensor(&mut rng, &[4, 3])),
        alpha: true,
        beta: true,
    };
    Ok(MicroFixture {
        model,
        template,
        regressor,
        input,
        targets,
        masked: vec![1, 4],
    })
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let n = g.value(y).len();
    let yf = g.reshape(y, vec![1, n])?;
    let wf = g.reshape(w, vec![n, 1])?;
    g.matmul(yf, wf)
}

fn check_with<F>(name: &str, inputs: Vec<Tensor>, step: f64, f: F) -> Result<GradCheckRow>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(GradCheckRow {
        name: name.to_string(),
        report: grad_check_many(f, &inputs, step)?,
    })
}

fn check<F>(name: &str, inputs: Vec<Tensor>, f: F) -> Result<GradCheckRow>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(name, inputs, STEP, f)
}

/// End-to-end loss of the micro model with respect to every parameter.
pub fn micro_model_check(fx: &MicroFixture, name: &str) -> Result<GradCheckRow> {
    let store = fx.model.params();
    let inputs: Vec<Tensor> = store.entries().iter().map(|e| (*e.value).clone()).collect();
    check_with(name, inputs, MODEL_STEP, |g, vars| {
        let pv = ParamVars::from_vars(vars.to_vec());
        let fv = fx.model.forward(g, &pv, &fx.input, &fx.masked)?;
        Ok(total_loss(g, &fv, &fx.regressor, &fx.targets)?.total)
    })
}

/// End-to-end loss of `model` with respect to the parameters whose names pass
/// `select`; every other parameter is held constant.
pub fn model_check<F>(
    name: &str,
    model: &MetroModel,
    input: &ModelInput,
    masked: &[usize],
    targets: &LossTargets,
    select: F,
) -> Result<GradCheckRow>
where
    F: Fn(&str) -> bool,
{
    let store = model.params();
    let chosen: Vec<bool> = store.entries().iter().map(|e| select(&e.name)).collect();
    let inputs: Vec<Tensor> = store
        .entries()
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(e, _)| (*e.value).clone())
        .collect();
    if inputs.is_empty() {
        return Err(crate::error::MetroError::Validation(format!(
            "{name}: no parameter selected"
        )));
    }
    let regressor = model.regressor();
    check_with(name, inputs, MODEL_STEP, |g, vars| {
        let mut it = vars.iter();
        let all = store
            .entries()
            .iter()
            .zip(&chosen)
            .map(|(e, &c)| {
                if c {
                    *it.next().expect("one var per chosen")
                } else {
                    g.leaf_shared(e.value.clone(), false)
                }
            })
            .collect();
        let fv = model.forward(g, &ParamVars::from_vars(all), input, masked)?;
        Ok(total_loss(g, &fv, &regressor, targets)?.total)
    })
}

/// Runs every check; `seed` varies the random inputs.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    let s = seed;
    let mut rows = vec![
        check("matmul", vec![r(&[3, 4]), r(&[4, 5])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, s)
        })?,
        check("linear", vec![r(&[3, 4]), r(&[4, 6]), r(&[6])], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, s)
        })?,
        check("add_sub_transpose", vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let b = g.add(b, v[1])?;
            let y = g.transpose(b)?;
            weighted_sum(g, y, s)
        })?,
        check("add_bias_scale", vec![r(&[3, 4]), r(&[4]), r(&[1])], |g, v| {
            let a = g.add_bias(v[0], v[1])?;
            let a = g.scale(a, 0.7);
            let y = g.scale_by(a, v[2])?;
            weighted_sum(g, y, s)
        })?,
        check("gelu", vec![r(&[4, 5])], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, s)
        })?,
        check("softplus", vec![r(&[4, 5])], |g, v| {
            let y = g.softplus(v[0]);
            weighted_sum(g, y, s)
        })?,
        check("softmax_rows", vec![r(&[4, 6])], |g, v| {
            let y = g.softmax_rows(v[0])?;
            weighted_sum(g, y, s)
        })?,
        check("layer_norm", vec![r(&[4, 6]), r(&[6]), r(&[6])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, s)
        })?,
        check("attention", vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2)?;
            weighted_sum(g, y, s)
        })?,
        check("slice_concat_broadcast", vec![r(&[4, 5])], |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 2, 3)?;
            let c = g.concat_cols(&[b, a])?;
            let d = g.slice_rows(c, 1, 2)?;
            let m = g.mean_rows(d);
            let y = g.broadcast_rows(m, 3)?;
            let y = g.reshape(y, vec![5, 3])?;
            weighted_sum(g, y, s)
        })?,
        check("replace_rows", vec![r(&[5, 3]), r(&[3])], |g, v| {
            let y = g.replace_rows(v[0], v[1], &[0, 3])?;
            weighted_sum(g, y, s)
        })?,
        check("sum", vec![r(&[3, 3])], |g, v| Ok(g.sum(v[0])))?,
        check("l1_mean", vec![r(&[5, 3]), r(&[5, 3])], |g, v| g.l1_mean(v[0], v[1]))?,
        check(
            "conv2d_max_pool",
            vec![r(&[2, 9, 8]), r(&[3, 2, 3, 2]), r(&[3])],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2)?;
                let y = g.max_pool2d(y, 2)?;
                weighted_sum(g, y, s)
            },
        )?,
        check("weak_perspective", vec![r(&[4, 3]), r(&[1, 1]), r(&[1, 2])], |g, v| {
            let y = project_weak_perspective(g, v[0], v[1], v[2])?;
            weighted_sum(g, y, s)
        })?,
    ];
    let fx = micro_fixture(seed, FeatureExtractor::Precomputed)?;
    let reg = fx.regressor.clone();
    rows.push(check("joint_regressor", vec![r(&[8, 3])], move |g, v| {
        let y = reg.regress_var(g, v[0])?;
        weighted_sum(g, y, s)
    })?);
    rows.push(micro_model_check(&fx, "micro_model")?);
    let cnn = micro_fixture(seed, FeatureExtractor::TinyCnn { image_size: 40 })?;
    rows.push(micro_model_check(&cnn, "micro_model_tiny_cnn")?);
    Ok(rows)
}

/// Fixed-width table of check results.
pub fn format_table(rows: &[GradCheckRow]) -> String {
    let mut out = format!(
        "{:<24} {:>8} {:>12} {:>12}  result\n",
        "check", "entries", "max_abs", "max_rel"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>8} {:>12.3e} {:>12.3e}  {}\n",
            r.name,
            r.report.checked,
            r.report.max_abs_err,
            r.report.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let rows = run_suite(0).unwrap();
        let table = format_table(&rows);
        assert!(rows.iter().all(GradCheckRow::passed), "{table}");
        println!("{table}");
    }
}
