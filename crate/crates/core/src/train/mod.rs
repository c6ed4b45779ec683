//! Optimization loop, evaluation, test-time augmentation and ablation sweeps.

mod ablation;
mod adam;
mod tta;

pub use ablation::{
    ablate_dims, ablate_mvm, ablate_positional, ablation_csv, dim_schemes, AblationRow, AblationSetup, MVM_CAPS,
};
pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use tta::{tta_average, tta_infer};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{MetroError, Result};
use crate::losses::{total_loss, LossBreakdown, LossTargets};
use crate::metrics::{root_centered, MetricReport};
use crate::model::{sample_mask, MetroModel, ModelOutput, Retain};
use crate::synth::{Augmentation, Dataset, Synthesizer, TrainingSample};
use crate::tensor::Tensor;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    /// Epoch (0-based) from which the decayed rate applies; half of `epochs` when unset.
    pub lr_decay_epoch: Option<usize>,
    pub mvm_max_fraction: f64,
    pub seed: u64,
    /// Evaluate on the eval set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Adds an L1 term on the coarse vertices against the down-sampled ground truth.
    pub coarse_loss: bool,
    /// Step-size multiplier for the upsampler parameters; 0 keeps them at their initial values.
    pub upsampler_lr_scale: f64,
    pub augment: Option<AugmentRange>,
    /// Stop once evaluated MPJPE falls below this fraction of the initial value.
    pub stop_at_mpjpe_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr_initial: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_epoch: None,
            mvm_max_fraction: 0.3,
            seed: 0,
            eval_every: 1,
            grad_clip: Some(1.0),
            coarse_loss: false,
            upsampler_lr_scale: 1.0,
            augment: None,
            stop_at_mpjpe_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial >= 0.0) || !self.lr_initial.is_finite() {
            return Err(MetroError::Config("lr_initial must be finite and nonnegative".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(MetroError::Config("lr_decay_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mvm_max_fraction) {
            return Err(MetroError::Config(format!(
                "mvm_max_fraction {} outside [0, 1]",
                self.mvm_max_fraction
            )));
        }
        if !(self.upsampler_lr_scale >= 0.0) || !self.upsampler_lr_scale.is_finite() {
            return Err(MetroError::Config(
                "upsampler_lr_scale must be finite and nonnegative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(MetroError::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(MetroError::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch.unwrap_or(self.epochs / 2)
    }

    /// Step-wise schedule: `lr_initial`, divided by `lr_decay_factor` from the decay epoch on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr_initial / self.lr_decay_factor
        } else {
            self.lr_initial
        }
    }
}

/// Per-sample augmentation draws: yaw uniform in `±yaw` radians, body scale times `1 ± scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRange {
    pub yaw: f64,
    pub scale: f64,
}

impl AugmentRange {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Augmentation {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        Augmentation {
            yaw: sym(rng, self.yaw),
            scale_jitter: 1.0 + sym(rng, self.scale),
        }
    }
}

/// Evaluation settings shared by `evaluate` and training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Joint subtracted from joints and vertices before MPJPE, MPVE and F-scores.
    pub root_joint: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { root_joint: Some(0) }
    }
}

/// Mean losses and optional evaluation for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub metrics: Option<MetricReport>,
}

pub const LOG_HEADER: &str = "epoch,lr,l_v,l_j,l_j_reg,l_j_proj,total,mpjpe,pa_mpjpe,mpve,f@5,f@15";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let mut row = format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, l.l_v, l.l_j, l.l_j_reg, l.l_j_proj, l.total
        );
        match &self.metrics {
            Some(m) => {
                let _ = write!(row, ",{}", m.csv_row());
            }
            None => row.push_str(",,,,,"),
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Evaluation before the first update.
    pub initial: Option<MetricReport>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        if let Some(m) = &self.initial {
            let _ = writeln!(out, "0,,,,,,,{}", m.csv_row());
        }
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.csv_row());
        }
        out
    }

    pub fn last_metrics(&self) -> Option<&MetricReport> {
        self.epochs.iter().rev().find_map(|e| e.metrics.as_ref())
    }
}

/// Where `train` writes its artifacts, and the generator used for augmentation.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainIo<'a> {
    pub out_dir: Option<&'a Path>,
    pub synth: Option<&'a Synthesizer>,
    pub eval_set: Option<&'a Dataset>,
    /// Downsample map used for the optional coarse loss.
    pub downsample: Option<&'a crate::mesh::DownsampleMap>,
}

fn targets(sample: &TrainingSample, coarse: Option<&crate::mesh::DownsampleMap>) -> LossTargets {
    LossTargets {
        vertices: Tensor::from_points(&sample.vertices),
        joints3d: Tensor::from_points(&sample.joints3d),
        joints2d: sample.joints2d_tensor(),
        coarse_vertices: coarse.map(|d| Tensor::from_points(&d.apply(&sample.vertices))),
        alpha: sample.alpha,
        beta: sample.beta,
    }
}

struct SampleGrad {
    losses: LossBreakdown,
    grads: Vec<Option<Vec<f64>>>,
}

fn sample_gradient(
    model: &MetroModel,
    adam: &AdamState,
    sample: &TrainingSample,
    masked: &[usize],
    coarse: Option<&crate::mesh::DownsampleMap>,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let fv = model.forward(&mut g, &pv, &sample.model_input(), masked)?;
    let t = targets(sample, coarse);
    let lv = total_loss(&mut g, &fv, &model.regressor(), &t)?;
    let losses = LossBreakdown::read(&g, &lv, t.alpha, t.beta);
    if !losses.total.is_finite() {
        return Err(MetroError::Numeric(format!("loss became {}", losses.total)));
    }
    g.backward(lv.total)?;
    let grads = adam.ids().iter().map(|&id| g.take_grad(pv.get(id))).collect();
    Ok(SampleGrad { losses, grads })
}

fn add_into(acc: &mut [Option<Vec<f64>>], grads: Vec<Option<Vec<f64>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn mean_losses(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for l in items {
        m.l_v += l.l_v;
        m.l_j += l.l_j;
        m.l_j_reg += l.l_j_reg;
        m.l_j_proj += l.l_j_proj;
        m.total += l.total;
    }
    m.l_v /= n;
    m.l_j /= n;
    m.l_j_reg /= n;
    m.l_j_proj /= n;
    m.total /= n;
    m
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains `model` in place. Per step: shuffle-batched samples, MVM masking, forward,
/// flagged loss, backward, batch-mean gradient, optional clipping, Adam.
pub fn train(model: &mut MetroModel, data: &Dataset, cfg: &TrainConfig, io: TrainIo<'_>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MetroError::Validation("training set is empty".into()));
    }
    if cfg.augment.is_some() && io.synth.is_none() {
        return Err(MetroError::Config("augmentation needs the sample generator".into()));
    }
    let coarse = if cfg.coarse_loss {
        Some(
            io.downsample
                .ok_or_else(|| MetroError::Config("coarse_loss needs the template downsample map".into()))?,
        )
    } else {
        None
    };
    if let Some(dir) = io.out_dir {
        fs::create_dir_all(dir).map_err(|e| MetroError::io(dir, e))?;
    }
    let eval_set = io.eval_set.unwrap_or(data);
    let opts = EvalOptions::default();
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    adam.scale_lr(model.params(), "upsampler.", cfg.upsampler_lr_scale);
    let n_tokens = model.config().num_tokens();
    let mut report = TrainReport {
        initial: None,
        epochs: Vec::new(),
        stopped_early: false,
    };
    if cfg.eval_every > 0 {
        report.initial = Some(evaluate(model, eval_set, opts)?);
    }
    let write_log = |report: &TrainReport| -> Result<()> {
        if let Some(dir) = io.out_dir {
            let p = dir.join("train_log.csv");
            fs::write(&p, report.log_csv()).map_err(|e| MetroError::io(&p, e))?;
        }
        Ok(())
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut epoch_rng = stream_rng(cfg.seed, 1 + epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut epoch_losses = Vec::with_capacity(data.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(b, &i)| (i, epoch_rng.gen::<u64>() ^ ((step * cfg.batch_size + b) as u64)))
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<SampleGrad>> = jobs
                .par_iter()
                .map(|&(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let masked = sample_mask(&mut rng, n_tokens, cfg.mvm_max_fraction);
                    let sample = match (cfg.augment, io.synth) {
                        (Some(a), Some(synth)) => synth.augment(&data.samples[i], a.draw(&mut rng))?,
                        _ => data.samples[i].clone(),
                    };
                    sample_gradient(model_ref, &adam, &sample, &masked, coarse)
                })
                .collect();
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; adam.ids().len()];
            for r in results {
                match r {
                    Ok(sg) => {
                        epoch_losses.push(sg.losses);
                        add_into(&mut acc, sg.grads);
                    }
                    Err(e) => {
                        if let Some(dir) = io.out_dir {
                            model.save_dir(dir.join("last_good"))?;
                            write_log(&report)?;
                        }
                        return Err(e);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut acc, c);
            }
            if let Err(e) = adam.step(model.params_mut(), &acc, lr) {
                if let Some(dir) = io.out_dir {
                    model.save_dir(dir.join("last_good"))?;
                    write_log(&report)?;
                }
                return Err(e);
            }
            model.params_mut().round_to_f32();
        }
        let metrics = if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            Some(evaluate(model, eval_set, opts)?)
        } else {
            None
        };
        let stop = match (&metrics, &report.initial, cfg.stop_at_mpjpe_fraction) {
            (Some(m), Some(init), Some(f)) => m.mpjpe < f * init.mpjpe,
            _ => false,
        };
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            losses: mean_losses(&epoch_losses),
            metrics,
        });
        write_log(&report)?;
        if let Some(dir) = io.out_dir {
            model.save_dir(dir.join("checkpoint"))?;
        }
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// Metrics for one prediction against its sample's labels.
pub fn sample_metrics(out: &ModelOutput, sample: &TrainingSample, opts: EvalOptions) -> Result<MetricReport> {
    let (pj, gj, pv, gv) = match opts.root_joint {
        Some(r) => {
            let (pr, gr) = (out.joints3d[r], sample.joints3d[r]);
            let shift = |pts: &[crate::mesh::Point3], o: crate::mesh::Point3| -> Vec<crate::mesh::Point3> {
                pts.iter().map(|p| [p[0] - o[0], p[1] - o[1], p[2] - o[2]]).collect()
            };
            (
                root_centered(&out.joints3d, r),
                root_centered(&sample.joints3d, r),
                shift(&out.full_vertices3d, pr),
                shift(&sample.vertices, gr),
            )
        }
        None => (
            out.joints3d.clone(),
            sample.joints3d.clone(),
            out.full_vertices3d.clone(),
            sample.vertices.clone(),
        ),
    };
    MetricReport::compute(&pj, &gj, &pv, &gv)
}

/// Mean metrics over samples that carry 3D labels (alpha = 1), with masking off.
pub fn evaluate(model: &MetroModel, data: &Dataset, opts: EvalOptions) -> Result<MetricReport> {
    let reports = data
        .samples
        .par_iter()
        .filter(|s| s.alpha)
        .map(|s| {
            let out = model.infer(&s.model_input(), Retain::None)?;
            sample_metrics(&out, s, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    if reports.is_empty() {
        return Err(MetroError::Validation("no samples with 3D labels to evaluate".into()));
    }
    MetricReport::mean(&reports)
}

/// Writes `text` to `dir/name`, creating `dir`.
pub fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| MetroError::io(dir, e))?;
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| MetroError::io(&p, e))?;
    Ok(p)
}
