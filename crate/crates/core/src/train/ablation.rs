use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate, train, EvalOptions, TrainConfig, TrainIo};
use crate::error::{MetroError, Result};
use crate::mesh::{JointRegressor, TemplateMesh};
use crate::metrics::MetricReport;
use crate::model::{EncoderConfig, MetroModel, ModelConfig, PositionalMode};
use crate::synth::Dataset;

pub const MVM_CAPS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

const SCHEME_LAYERS: usize = 12;

/// One trained variant and its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub final_loss: f64,
    pub metrics: MetricReport,
}

impl AblationRow {
    pub fn is_finite(&self) -> bool {
        self.final_loss.is_finite() && self.metrics.is_finite()
    }
}

pub fn ablation_csv(key: &str, rows: &[AblationRow]) -> String {
    let mut out = format!("{key},final_loss,mpjpe,pa_mpjpe,mpve,f@5,f@15\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.label, r.final_loss, r.metrics.csv_row());
    }
    out
}

/// Shared inputs for every variant in a sweep.
#[derive(Clone, Copy, Debug)]
pub struct AblationSetup<'a> {
    pub template: &'a TemplateMesh,
    pub regressor: &'a JointRegressor,
    pub train_set: &'a Dataset,
    pub eval_set: &'a Dataset,
    pub train: &'a TrainConfig,
    pub model_seed: u64,
}

fn run_variant(
    setup: &AblationSetup<'_>,
    config: ModelConfig,
    train_cfg: &TrainConfig,
    label: String,
) -> Result<AblationRow> {
    let mut model = MetroModel::init(config, setup.template, setup.regressor, setup.model_seed)?;
    let io = TrainIo {
        eval_set: Some(setup.eval_set),
        ..TrainIo::default()
    };
    let cfg = TrainConfig {
        eval_every: 0,
        ..train_cfg.clone()
    };
    let report = train(&mut model, setup.train_set, &cfg, io)?;
    let final_loss = report.epochs.last().map_or(f64::NAN, |e| e.losses.total);
    let metrics = evaluate(&model, setup.eval_set, EvalOptions::default())?;
    let row = AblationRow {
        label,
        final_loss,
        metrics,
    };
    if !row.is_finite() {
        return Err(MetroError::Numeric(format!(
            "ablation variant {} produced non-finite results",
            row.label
        )));
    }
    Ok(row)
}

/// One model per masking cap, same model seed and data order.
pub fn ablate_mvm(setup: &AblationSetup<'_>, base: &ModelConfig, caps: &[f64]) -> Result<Vec<AblationRow>> {
    caps.iter()
        .map(|&cap| {
            let mut config = base.clone();
            config.encoder.mvm_max_fraction = cap;
            let cfg = TrainConfig {
                mvm_max_fraction: cap,
                ..setup.train.clone()
            };
            run_variant(setup, config, &cfg, format!("{cap}"))
        })
        .collect()
}

/// The four reduction schedules: no reduction, then down to H/2, H/4 and H/8.
pub fn dim_schemes(feature_dim: usize) -> Vec<(String, Vec<usize>)> {
    let h = feature_dim;
    let mut out = vec![(format!("{}->3", h + 3), Vec::new())];
    for depth in 1..=3 {
        let widths: Vec<usize> = (1..=depth).map(|d| h >> d).collect();
        let label = std::iter::once(h + 3)
            .chain(widths.iter().copied())
            .chain(std::iter::once(3))
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("->");
        out.push((label, widths));
    }
    out
}

/// Trains every reduction schedule with the same total layer count.
pub fn ablate_dims(setup: &AblationSetup<'_>, base: &ModelConfig, max_heads: usize) -> Result<Vec<AblationRow>> {
    dim_schemes(base.encoder.feature_dim)
        .into_iter()
        .map(|(label, widths)| {
            let mut enc = EncoderConfig::from_widths(base.encoder.feature_dim, &widths, SCHEME_LAYERS, max_heads)?;
            enc.mvm_max_fraction = base.encoder.mvm_max_fraction;
            enc.positional_mode = base.encoder.positional_mode;
            let config = ModelConfig {
                encoder: enc,
                ..base.clone()
            };
            run_variant(setup, config, setup.train, label)
        })
        .collect()
}

/// Template coordinates against index sinusoids as the positional part of each query.
pub fn ablate_positional(setup: &AblationSetup<'_>, base: &ModelConfig) -> Result<Vec<AblationRow>> {
    [PositionalMode::TemplateCoords, PositionalMode::Sinusoidal]
        .into_iter()
        .map(|mode| {
            let mut config = base.clone();
            config.encoder.positional_mode = mode;
            let label = match mode {
                PositionalMode::TemplateCoords => "template_coords",
                PositionalMode::Sinusoidal => "sinusoidal",
            };
            run_variant(setup, config, setup.train, label.to_string())
        })
        .collect()
}
