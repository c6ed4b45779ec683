//! End-to-end acceptance checks. Each test prints one `criterion N PASS|FAIL` line.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metro_core::attention_map::{aggregate_attention, AttentionMap};
use metro_core::autodiff::Graph;
use metro_core::gradsuite::{micro_fixture, model_check, run_suite, GradCheckRow, GRADCHECK_TOL};
use metro_core::losses::{project_points, total_loss, LossTargets};
use metro_core::mesh::{dist2, Point3};
use metro_core::metrics::{f_score, mpjpe, pa_mpjpe, Similarity};
use metro_core::model::{
    encode_checkpoint, sample_mask, EncoderConfig, FeatureExtractor, ForwardVars, MetroModel, ModelConfig, Retain,
};
use metro_core::synth::{Dataset, Preset, SynthConfig, Synthesizer};
use metro_core::train::{
    ablate_dims, ablate_mvm, ablation_csv, evaluate, train, AblationSetup, EvalOptions, TrainConfig, TrainIo, MVM_CAPS,
};
use metro_core::Tensor;

/// Writes through the raw stdout handle so the line survives the test harness's output capture.
fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(id: u32, label: &str, pass: bool, detail: &str) {
    emit(format!(
        "criterion {id:>2} {} {label}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion {id} ({label}) failed: {detail}");
}

/// Outcome of one check, reported by the calling criterion.
struct Check {
    label: &'static str,
    pass: bool,
    detail: String,
}

impl Check {
    fn report(self, id: u32) {
        verdict(id, self.label, self.pass, &self.detail);
    }
}

fn synth(preset: Preset, n: usize, seed: u64) -> Synthesizer {
    Synthesizer::new(SynthConfig {
        preset,
        n,
        seed,
        feature_dim: 64,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_for(s: &Synthesizer, layers: usize, seed: u64) -> MetroModel {
    let mut enc = EncoderConfig::default_for(64);
    for b in &mut enc.blocks {
        b.layers = layers;
    }
    MetroModel::init(s.model_config(enc), &s.assets.mesh, &s.assets.regressor, seed).unwrap()
}

// ---- criterion 1 ----

fn gradient_rows(preset: Option<Preset>) -> Vec<GradCheckRow> {
    let Some(preset) = preset else {
        return run_suite(0).unwrap();
    };
    // Full preset topology with a narrow encoder, checked on every small parameter tensor.
    let s = Synthesizer::new(SynthConfig {
        preset,
        n: 1,
        feature_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut cfg = s.model_config(EncoderConfig::from_widths(8, &[4], 1, 1).unwrap());
    cfg.upsampler_hidden = 3;
    let mut model = MetroModel::init(cfg, &s.assets.mesh, &s.assets.regressor, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in model.params().ids().collect::<Vec<_>>() {
        let e = model.params().entry(id);
        if e.trainable && e.name != "upsampler.linear" {
            let shape = e.value.shape().to_vec();
            let n = shape.iter().product();
            let t = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
            model.params_mut().set(id, t).unwrap();
        }
    }
    let sample = &s.generate().unwrap().samples[0];
    let targets = LossTargets {
        vertices: Tensor::from_points(&sample.vertices),
        joints3d: Tensor::from_points(&sample.joints3d),
        joints2d: sample.joints2d_tensor(),
        coarse_vertices: None,
        alpha: true,
        beta: true,
    };
    let masked = vec![1, 5, 30];
    let small = |name: &str| {
        name == "mask_token"
            || name.starts_with("encoder.")
            || name.starts_with("head.")
            || name.starts_with("camera.")
            || name == "upsampler.fc1.bias"
    };
    vec![model_check("preset_model", &model, &sample.model_input(), &masked, &targets, small).unwrap()]
}

fn check_gradients(preset: Option<Preset>) -> Check {
    let t0 = Instant::now();
    let rows = gradient_rows(preset);
    let elapsed = t0.elapsed();
    let worst = rows.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let entries: usize = rows.iter().map(|r| r.report.checked).sum();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(60);
    Check {
        label: "gradient suite",
        pass,
        detail: format!(
            "{} checks, {entries} entries, max rel err {worst:.2e} (< {GRADCHECK_TOL:e}), {:.1}s (< 60s), failed {failed:?}",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    }
}

#[test]
fn c01_gradient_suite() {
    check_gradients(None).report(1);
}

// ---- criterion 2 ----

const OVERFIT_SAMPLES: usize = 64;
const OVERFIT_MAX_EPOCHS: usize = 500;
const OVERFIT_FRACTION: f64 = 0.1;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: OVERFIT_MAX_EPOCHS,
        batch_size: 1,
        lr_initial: 5e-3,
        lr_decay_epoch: Some(50),
        mvm_max_fraction: 0.0,
        eval_every: 5,
        upsampler_lr_scale: 0.0,
        stop_at_mpjpe_fraction: Some(OVERFIT_FRACTION),
        ..TrainConfig::default()
    }
}

fn check_overfit(preset: Preset) -> Check {
    let s = synth(preset, OVERFIT_SAMPLES, 1);
    let data = s.generate().unwrap();
    let mut model = model_for(&s, 1, 0);
    let cfg = overfit_config();
    let t0 = Instant::now();
    let report = train(&mut model, &data, &cfg, TrainIo::default()).unwrap();
    let elapsed = t0.elapsed();
    let initial = report.initial.as_ref().unwrap().mpjpe;
    let last = report.epochs.last().unwrap();
    let final_mpjpe = report.last_metrics().unwrap().mpjpe;
    let pass = final_mpjpe < OVERFIT_FRACTION * initial && elapsed < OVERFIT_BUDGET;
    Check {
        label: "overfit smoke",
        pass,
        detail: format!(
            "{preset:?}: epoch-0 MPJPE {initial:.1} mm -> {final_mpjpe:.1} mm after {} epochs \
             (target < {:.1} mm within {OVERFIT_MAX_EPOCHS}), {:.0}s (< {}s)",
            last.epoch,
            OVERFIT_FRACTION * initial,
            elapsed.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    }
}

#[test]
fn c02_overfit_smoke() {
    check_overfit(Preset::Body).report(2);
}

// ---- criterion 3 ----

fn check_mvm(preset: Preset) -> Check {
    let s = synth(preset, 1, 3);
    let model = model_for(&s, 1, 2);
    let n = model.config().num_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let mean = (0..draws)
        .map(|_| sample_mask(&mut rng, n, 0.3).len() as f64 / n as f64)
        .sum::<f64>()
        / draws as f64;
    let mean_ok = (mean - 0.15).abs() <= 0.01;

    let sample = &s.generate().unwrap().samples[0];
    let plain = model.infer(&sample.model_input(), Retain::None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masked = sample_mask(&mut rng, n, 0.0);
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let fv = model.forward(&mut g, &pv, &sample.model_input(), &masked).unwrap();
    let trained_path = model.extract(&g, &fv, Retain::None);
    let bitwise = masked.is_empty() && trained_path == plain;
    Check {
        label: "masked vertex modeling",
        pass: mean_ok && bitwise,
        detail: format!(
            "{preset:?}: mean masked fraction {mean:.4} over {draws} draws (0.15 ± 0.01); cap 0 equals plain forward bitwise: {bitwise}"
        ),
    }
}

#[test]
fn c03_mvm_mechanics() {
    check_mvm(Preset::Body).report(3);
}

// ---- criterion 4 ----

fn token_outputs(model: &MetroModel, x: &[f64], codes: &Tensor, masked: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let pv = model.params().bind_frozen(&mut g);
    let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec()).unwrap());
    let cv = g.constant(codes.clone());
    let fv: ForwardVars = model.forward_from(&mut g, &pv, xv, cv, masked).unwrap();
    g.value(fv.token_out).clone()
}

fn check_equivariance(preset: Preset) -> Check {
    let s = synth(preset, 1, 4);
    let model = model_for(&s, 4, 3);
    let n = model.config().num_tokens();
    let x = match &s.generate().unwrap().samples[0].model_input() {
        metro_core::model::ModelInput::Feature(x) => x.clone(),
        _ => unreachable!(),
    };
    let codes = model.positional().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let masked = sample_mask(&mut rng, n, 0.3);
        let base = token_outputs(&model, &x, &codes, &masked);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // Row j of the permuted sequence is row perm[j] of the original.
        let pcodes = Tensor::new(vec![n, 3], perm.iter().flat_map(|&i| codes.row(i).to_vec()).collect()).unwrap();
        let mut pmasked: Vec<usize> = (0..n).filter(|&j| masked.binary_search(&perm[j]).is_ok()).collect();
        pmasked.sort_unstable();
        let out = token_outputs(&model, &x, &pcodes, &pmasked);
        for (j, &i) in perm.iter().enumerate() {
            for (a, b) in out.row(j).iter().zip(base.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Check {
        label: "permutation equivariance",
        pass: worst < 1e-6,
        detail: format!("{preset:?}: 50 permutations of {n} queries, max abs deviation {worst:.2e} (< 1e-6)"),
    }
}

#[test]
fn c04_permutation_equivariance() {
    check_equivariance(Preset::Body).report(4);
}

// ---- criterion 5 ----

fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
            ]
        })
        .collect()
}

fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
    let axis = nalgebra::Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(-3.0..3.0));
    Similarity {
        scale: rng.gen_range(0.3..3.0),
        rotation: (*rot.matrix()).into(),
        translation: [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ],
    }
}

/// Nearest-neighbor F-score written out with explicit loops.
fn brute_f_score(pred: &[Point3], gt: &[Point3], threshold_mm: f64) -> f64 {
    let t = threshold_mm / 1000.0;
    let within = |from: &[Point3], to: &[Point3]| {
        from.iter()
            .filter(|p| {
                let mut best = f64::INFINITY;
                for q in to {
                    best = best.min(dist2(p, q));
                }
                best.sqrt() < t
            })
            .count() as f64
            / from.len() as f64
    };
    let (precision, recall) = (within(pred, gt), within(gt, pred));
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn check_metrics(preset: Preset) -> Check {
    let s = synth(preset, 100, 6);
    let data = s.generate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let worst_similarity = data
        .samples
        .iter()
        .map(|sample| {
            let moved = random_similarity(&mut rng).apply_all(&sample.joints3d);
            pa_mpjpe(&moved, &sample.joints3d).unwrap()
        })
        .fold(0.0, f64::max);
    let k = s.assets.num_joints();
    let mut order_violations = 0;
    let mut worst_excess = 0.0f64;
    for i in 0..1000 {
        let gt = &data.samples[i % data.len()].joints3d;
        let noise = [0.001, 0.01, 0.1][i % 3];
        let pred: Vec<Point3> = if i % 4 == 0 {
            random_points(&mut rng, k, 0.5)
        } else {
            gt.iter()
                .map(|p| {
                    [
                        p[0] + rng.gen_range(-noise..noise),
                        p[1] + rng.gen_range(-noise..noise),
                        p[2] + rng.gen_range(-noise..noise),
                    ]
                })
                .collect()
        };
        let excess = pa_mpjpe(&pred, gt).unwrap() - mpjpe(&pred, gt).unwrap();
        worst_excess = worst_excess.max(excess);
        if excess > 1e-9 {
            order_violations += 1;
        }
    }
    let mut f_mismatch = 0;
    let mut f_cases = 0;
    for n in 1..=8 {
        for _ in 0..50 {
            let m = rng.gen_range(1..=8);
            let (a, b) = (random_points(&mut rng, n, 0.01), random_points(&mut rng, m, 0.01));
            for t in [1.0, 5.0, 15.0] {
                f_cases += 1;
                if f_score(&a, &b, t).unwrap() != brute_f_score(&a, &b, t) {
                    f_mismatch += 1;
                }
            }
        }
    }
    let pass = worst_similarity < 1e-6 && order_violations == 0 && f_mismatch == 0;
    Check {
        label: "metric oracles",
        pass,
        detail: format!(
            "{preset:?}: max PA-MPJPE after similarity {worst_similarity:.2e} mm (< 1e-6); \
             PA > MPJPE + 1e-9 in {order_violations}/1000 pairs (largest excess {worst_excess:.2e} mm); F-score mismatches {f_mismatch}/{f_cases}"
        ),
    }
}

#[test]
fn c05_metric_oracles() {
    check_metrics(Preset::Body).report(5);
}

// ---- criterion 6 ----

fn check_losses(preset: Preset) -> Check {
    let s = synth(preset, 1, 8);
    let sample = s.generate().unwrap().samples.remove(0);
    let reg = &s.assets.regressor;
    // Predictions that agree with every target: joints are the regressed mesh joints.
    let verts = sample.vertices.clone();
    let joints = reg.regress(&verts).unwrap();
    let cam = sample.pose.camera;
    let j2d = project_points(&joints, &cam);
    let mut g = Graph::new();
    let full = g.constant(Tensor::from_points(&verts));
    let jv = g.constant(Tensor::from_points(&joints));
    let scale = g.constant(Tensor::matrix(1, 1, vec![cam.scale]).unwrap());
    let trans = g.constant(Tensor::matrix(1, 2, cam.translation.to_vec()).unwrap());
    let fv = ForwardVars {
        tokens: jv,
        hidden_final: jv,
        token_out: jv,
        joints: jv,
        coarse: jv,
        full,
        cam_scale: scale,
        cam_trans: trans,
        attention: Vec::new(),
    };
    let targets = LossTargets {
        vertices: Tensor::from_points(&verts),
        joints3d: Tensor::from_points(&joints),
        joints2d: Tensor::matrix(j2d.len(), 2, j2d.iter().flatten().copied().collect()).unwrap(),
        coarse_vertices: None,
        alpha: true,
        beta: true,
    };
    let lv = total_loss(&mut g, &fv, reg, &targets).unwrap();
    let terms: Vec<f64> = [lv.l_v, lv.l_j, lv.l_j_reg, lv.l_j_proj, lv.total]
        .iter()
        .map(|&v| g.value(v).data()[0])
        .collect();
    let zero_terms = terms.iter().all(|&t| t == 0.0);

    // Flag semantics on a trained-shape model with random weights.
    let model = {
        let mut m = model_for(&s, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for id in m.params().ids().collect::<Vec<_>>() {
            let e = m.params().entry(id);
            if e.trainable && e.name.starts_with("upsampler.fc2") {
                let shape = e.value.shape().to_vec();
                let n = shape.iter().product();
                let t = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect()).unwrap();
                m.params_mut().set(id, t).unwrap();
            }
        }
        m
    };
    let grads = |alpha: bool, beta: bool| -> Vec<(String, f64)> {
        let mut g = Graph::new();
        let pv = model.params().bind(&mut g);
        let fv = model.forward(&mut g, &pv, &sample.model_input(), &[]).unwrap();
        let t = LossTargets {
            vertices: Tensor::from_points(&sample.vertices),
            joints3d: Tensor::from_points(&sample.joints3d),
            joints2d: sample.joints2d_tensor(),
            coarse_vertices: None,
            alpha,
            beta,
        };
        let lv = total_loss(&mut g, &fv, &model.regressor(), &t).unwrap();
        g.backward(lv.total).unwrap();
        model
            .params()
            .ids()
            .filter(|&id| model.params().entry(id).trainable)
            .map(|id| {
                let n = g.grad_data(pv.get(id)).map_or(0.0, |d| d.iter().map(|x| x.abs()).sum());
                (model.params().entry(id).name.clone(), n)
            })
            .collect()
    };
    let no_alpha = grads(false, true);
    let alpha_ok = no_alpha
        .iter()
        .filter(|(n, _)| n.starts_with("upsampler."))
        .all(|(_, g)| *g == 0.0)
        && no_alpha.iter().any(|(n, g)| n.starts_with("camera.") && *g > 0.0);
    let no_beta = grads(true, false);
    let beta_ok = no_beta
        .iter()
        .filter(|(n, _)| n.starts_with("camera."))
        .all(|(_, g)| *g == 0.0)
        && no_beta.iter().any(|(n, g)| n.starts_with("upsampler.") && *g > 0.0);
    Check {
        label: "loss identities",
        pass: zero_terms && alpha_ok && beta_ok,
        detail: format!(
            "{preset:?}: perfect-prediction terms {terms:?}; alpha=0 zeroes 3D-only gradients: {alpha_ok}; \
             beta=0 zeroes camera gradients: {beta_ok}"
        ),
    }
}

#[test]
fn c06_loss_identities() {
    check_losses(Preset::Body).report(6);
}

// ---- criterion 7 ----

fn check_attention(preset: Preset, expected_tokens: usize) -> Check {
    let s = synth(preset, 3, 10);
    let data = s.generate().unwrap();
    let model = model_for(&s, 4, 5);
    let outs: Vec<_> = data
        .samples
        .iter()
        .map(|x| model.infer(&x.model_input(), Retain::All).unwrap())
        .collect();
    let mut worst_row = 0.0f64;
    for out in &outs {
        for layer in &out.attention {
            let n = layer.tokens;
            for h in 0..layer.heads {
                for row in layer.head(h).chunks(n) {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    let last: Vec<_> = outs.iter().map(|o| o.attention.last().unwrap()).collect();
    let map = aggregate_attention(&last).unwrap();
    worst_row = worst_row.max(map.max_row_sum_error());
    let back = AttentionMap::from_csv(&map.to_csv()).unwrap();
    let round_trip = map
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass = worst_row < 1e-6 && map.tokens == expected_tokens && back.tokens == map.tokens && round_trip <= 1e-9;
    Check {
        label: "attention contract",
        pass,
        detail: format!(
            "{preset:?}: max |row sum - 1| {worst_row:.2e} (< 1e-6); map {0}x{0} (expected {expected_tokens}); \
             CSV round-trip max error {round_trip:.1e} (<= 1e-9)",
            map.tokens
        ),
    }
}

#[test]
fn c07_attention_contract() {
    check_attention(Preset::Body, 445).report(7);
}

// ---- criterion 8 ----

#[test]
fn c08_ablation_harness() {
    let s = synth(Preset::Body, 2, 12);
    let train_set = s.generate().unwrap();
    let eval_set = synth(Preset::Body, 2, 13).generate().unwrap();
    let base = s.model_config(EncoderConfig::default_for(64));
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr_initial: 1e-3,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let setup = AblationSetup {
        template: &s.assets.mesh,
        regressor: &s.assets.regressor,
        train_set: &train_set,
        eval_set: &eval_set,
        train: &cfg,
        model_seed: 0,
    };
    let mvm = ablation_csv("mvm_max_fraction", &ablate_mvm(&setup, &base, &MVM_CAPS).unwrap());
    let dims_rows = ablate_dims(&setup, &base, 4).unwrap();
    let dims = ablation_csv("scheme", &dims_rows);
    let complete = |csv: &str, rows: usize| {
        let lines: Vec<&str> = csv.lines().collect();
        lines.len() == rows + 1
            && lines.iter().all(|l| l.split(',').count() == 7)
            && lines[1..].iter().all(|l| {
                l.split(',')
                    .skip(1)
                    .all(|f| f.parse::<f64>().map_or(false, f64::is_finite))
            })
    };
    let labels: Vec<&str> = dims.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let pass = complete(&mvm, MVM_CAPS.len())
        && complete(&dims, 4)
        && labels == ["67->3", "67->32->3", "67->32->16->3", "67->32->16->8->3"];
    verdict(
        8,
        "ablation harness",
        pass,
        &format!(
            "mvm sweep {} rows, width schedules {labels:?} at 12 layers each, all finite",
            MVM_CAPS.len()
        ),
    );
}

// ---- criterion 9 ----

#[test]
fn c09_persistence() {
    let s = synth(Preset::Hand, 6, 14);
    let data = s.generate().unwrap();
    let bytes = data.to_bytes();
    let data_ok =
        Dataset::from_bytes(&bytes).unwrap().to_bytes() == bytes && Dataset::from_bytes(&bytes).unwrap() == data;
    let mut model = model_for(&s, 1, 6);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 3,
        lr_initial: 1e-3,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, TrainIo::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save_dir(dir.path()).unwrap();
    let loaded = MetroModel::load_dir(dir.path()).unwrap();
    let ckpt_ok = encode_checkpoint(loaded.config(), loaded.params())
        == encode_checkpoint(model.config(), model.params())
        && std::fs::read(dir.path().join("weights.mtro")).unwrap() == encode_checkpoint(model.config(), model.params())
        && loaded == model;
    let path = dir.path().join("data.mtds");
    data.save(&path).unwrap();
    let reloaded = Dataset::load(&path).unwrap();
    let before = evaluate(&model, &data, EvalOptions::default()).unwrap();
    let after = evaluate(&loaded, &reloaded, EvalOptions::default()).unwrap();
    let metrics_ok = before == after && before.csv_row() == after.csv_row();
    verdict(
        9,
        "persistence",
        data_ok && ckpt_ok && metrics_ok,
        &format!("dataset bytes equal: {data_ok}; checkpoint bytes equal: {ckpt_ok}; metrics after reload bitwise equal: {metrics_ok}"),
    );
}

// ---- criterion 10 ----

#[test]
fn c10_hand_preset() {
    let s = synth(Preset::Hand, 1, 0);
    assert_eq!((s.assets.num_joints(), s.assets.mesh.num_coarse()), (21, 195));
    let cfg: ModelConfig = s.model_config(EncoderConfig::default_for(64));
    assert_eq!(cfg.feature_extractor, FeatureExtractor::Precomputed);
    let checks = [
        check_gradients(Some(Preset::Hand)),
        check_overfit(Preset::Hand),
        check_mvm(Preset::Hand),
        check_equivariance(Preset::Hand),
        check_metrics(Preset::Hand),
        check_losses(Preset::Hand),
        check_attention(Preset::Hand, 21 + 195),
    ];
    for (i, c) in checks.iter().enumerate() {
        emit(format!(
            "    hand {} {}: {}",
            i + 1,
            if c.pass { "ok  " } else { "FAIL" },
            c.detail
        ));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.label).collect();
    verdict(
        10,
        "hand preset",
        failed.is_empty(),
        &format!(
            "K=21, M=195: {}/7 of criteria 1-7 hold, failing {failed:?}",
            7 - failed.len()
        ),
    );
}

#[test]
fn micro_fixture_matches_the_stated_sizes() {
    let fx = micro_fixture(0, FeatureExtractor::Precomputed).unwrap();
    let c = fx.model.config();
    assert_eq!(
        (c.encoder.feature_dim, c.num_joints, c.num_coarse, c.num_full),
        (8, 2, 4, 8)
    );
    assert_eq!(
        (
            c.encoder.blocks.len(),
            c.encoder.total_layers(),
            c.encoder.blocks[0].heads
        ),
        (1, 1, 1)
    );
}
