//! `metro` command line: argument parsing, config merging and artifact writing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use metro_core::attention_map::aggregate_attention;
use metro_core::gradsuite::{format_table, run_suite};
use metro_core::mesh::save_obj;
use metro_core::metrics::MetricReport;
use metro_core::model::{CameraParams, EncoderConfig, MetroModel, ModelConfig, ModelOutput, PositionalMode, Retain};
use metro_core::synth::{Augmentation, Dataset, FeatureMode, Preset, SynthConfig, Synthesizer};
use metro_core::train::{
    ablate_dims, ablate_mvm, ablate_positional, ablation_csv, evaluate, sample_metrics, train, tta_infer,
    write_artifact, AblationSetup, AugmentRange, EvalOptions, TrainConfig, TrainIo, MVM_CAPS,
};
use metro_core::{MetroError, Result};

/// Encoder and upsampler shape, on top of the input size implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Intermediate block widths; `None` means H/2, H/4, H/8.
    pub widths: Option<Vec<usize>>,
    pub layers_per_block: usize,
    pub max_heads: usize,
    pub upsampler_hidden: usize,
    pub positional_mode: PositionalMode,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            widths: None,
            layers_per_block: 4,
            max_heads: 4,
            upsampler_hidden: 64,
            positional_mode: PositionalMode::TemplateCoords,
        }
    }
}

impl ModelOptions {
    pub fn encoder(&self, feature_dim: usize, mvm_max_fraction: f64) -> Result<EncoderConfig> {
        let widths = self
            .widths
            .clone()
            .unwrap_or_else(|| vec![feature_dim / 2, feature_dim / 4, feature_dim / 8]);
        let blocks = widths.len().max(1);
        let mut enc = EncoderConfig::from_widths(feature_dim, &widths, self.layers_per_block * blocks, self.max_heads)?;
        enc.mvm_max_fraction = mvm_max_fraction;
        enc.positional_mode = self.positional_mode;
        Ok(enc)
    }

    pub fn model_config(&self, synth: &Synthesizer, mvm_max_fraction: f64) -> Result<ModelConfig> {
        let mut cfg = synth.model_config(self.encoder(synth.config.feature_dim, mvm_max_fraction)?);
        cfg.upsampler_hidden = self.upsampler_hidden;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Contents of `--config`; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MetroError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MetroError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "metro",
    version,
    about = "Mesh-regression transformer on synthetic bodies and hands"
)]
pub struct Cli {
    /// JSON config with optional `data`, `model` and `train` sections; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization, shuffling and masking
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 makes every run reproducible bit for bit
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving every artifact and the effective config
    #[arg(long, global = true, default_value = "metro-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Body,
    Hand,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Body => Preset::Body,
            PresetArg::Hand => Preset::Hand,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    OracleMlp,
    TinyCnn,
}

impl From<FeatureArg> for FeatureMode {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::OracleMlp => FeatureMode::OracleMlp,
            FeatureArg::TinyCnn => FeatureMode::TinyCnn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Mvm,
    Dims,
    Positional,
    All,
}

/// Data-generation overrides shared by several subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Number of samples
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub feature_mode: Option<FeatureArg>,
    /// Fraction of samples carrying 2D labels only
    #[arg(long)]
    pub p_2d_only: Option<f64>,
}

/// Model and optimizer overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Upper bound of the per-sample masked fraction
    #[arg(long)]
    pub mvm: Option<f64>,
    #[arg(long)]
    pub layers_per_block: Option<usize>,
    /// Step-size multiplier for the upsampler (0 freezes it)
    #[arg(long)]
    pub upsampler_lr_scale: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file (dataset.mtds)
    GenData {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model; writes train_log.csv and checkpoint/
    Train {
        /// Training set; generated from the config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation set; the training set when omitted
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[command(flatten)]
        gen: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Report mpjpe, pa_mpjpe, mpve, f@5, f@15 for a model or a predictions file
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Model directory (model.json + weights.mtro)
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// JSON list of {"joints3d": [[x,y,z]..], "vertices": [[x,y,z]..]}, one per sample
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write coarse.obj, full.obj and camera.json for one sample
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Average over this many augmented copies (1 disables)
        #[arg(long, default_value_t = 1)]
        tta: usize,
    },
    /// Export the aggregate attention map (CSV, PGM) and per-joint rows
    Attention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated joint names
        #[arg(long, value_delimiter = ',', default_value = "R-Wrist,L-Wrist,Head")]
        joints: Vec<String>,
    },
    /// Finite-difference check of every operation and the micro model
    Gradcheck,
    /// Train one variant per setting and write one CSV per sweep
    Ablate {
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        sweep: Sweep,
        /// Held-out samples generated after the training set
        #[arg(long, default_value_t = 16)]
        eval_n: usize,
        #[command(flatten)]
        gen: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_data(cfg: &mut SynthConfig, a: &DataArgs) {
    if let Some(p) = a.preset {
        cfg.preset = p.into();
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(f) = a.feature_mode {
        cfg.feature_mode = f.into();
    }
    if let Some(p) = a.p_2d_only {
        cfg.p_2d_only = p;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_initial = v;
    }
    if let Some(v) = a.mvm {
        t.mvm_max_fraction = v;
    }
    if let Some(v) = a.upsampler_lr_scale {
        t.upsampler_lr_scale = v;
    }
    if let Some(v) = a.layers_per_block {
        cfg.model.layers_per_block = v;
    }
}

/// Merges the config file, `--seed` and subcommand flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::GenData { data } => apply_data(&mut cfg.data, data),
        Command::Train { gen, train, .. } | Command::Ablate { gen, train, .. } => {
            apply_data(&mut cfg.data, gen);
            apply_train(&mut cfg, train);
        }
        _ => {}
    }
    cfg.data.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(MetroError::Config("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out_dir.as_path();
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_artifact(out, "config.json", &json)?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&cfg, out),
        Command::Train { data, eval_data, .. } => train_cmd(&cfg, data.as_deref(), eval_data.as_deref(), out),
        Command::Eval {
            data,
            model,
            predictions,
        } => eval_cmd(data, model.as_deref(), predictions.as_deref(), out),
        Command::Infer {
            model,
            data,
            index,
            tta,
        } => infer_cmd(&cfg, model, data, *index, *tta, out),
        Command::Attention {
            model,
            data,
            index,
            joints,
        } => attention_cmd(model, data, *index, joints, out),
        Command::Gradcheck => gradcheck_cmd(cli.seed.unwrap_or(0), out),
        Command::Ablate { sweep, eval_n, .. } => ablate_cmd(&cfg, *sweep, *eval_n, out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = Synthesizer::new(cfg.data.clone())?.generate()?;
    let path = out.join("dataset.mtds");
    data.save(&path)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}

/// Generator matching a loaded dataset, so augmentation re-renders consistent inputs.
fn synth_for(cfg: &RunConfig, data: &Dataset) -> Result<Synthesizer> {
    let mut sc = cfg.data.clone();
    sc.preset = data.preset;
    sc.feature_mode = data.feature_mode;
    match data.feature_mode {
        FeatureMode::OracleMlp => sc.feature_dim = data.input_dim,
        FeatureMode::TinyCnn => sc.image_size = data.input_dim,
    }
    Synthesizer::new(sc)
}

fn train_cmd(cfg: &RunConfig, data: Option<&Path>, eval_data: Option<&Path>, out: &Path) -> Result<()> {
    let (synth, data) = match data {
        Some(p) => {
            let d = Dataset::load(p)?;
            (synth_for(cfg, &d)?, d)
        }
        None => {
            let s = Synthesizer::new(cfg.data.clone())?;
            let d = s.generate()?;
            (s, d)
        }
    };
    let eval_set = eval_data.map(Dataset::load).transpose()?;
    let mc = cfg.model.model_config(&synth, cfg.train.mvm_max_fraction)?;
    let mut model = MetroModel::init(mc, &synth.assets.mesh, &synth.assets.regressor, cfg.train.seed)?;
    let io = TrainIo {
        out_dir: Some(out),
        synth: Some(&synth),
        eval_set: eval_set.as_ref(),
        downsample: Some(&synth.assets.mesh.downsample),
    };
    let report = train(&mut model, &data, &cfg.train, io)?;
    if let Some(m) = report.last_metrics() {
        println!("{}\n{}", m.csv_header(), m.csv_row());
    }
    println!("checkpoint in {}", out.join("checkpoint").display());
    Ok(())
}

#[derive(Deserialize)]
struct Prediction {
    joints3d: Vec<[f64; 3]>,
    vertices: Vec<[f64; 3]>,
}

fn eval_cmd(data: &Path, model: Option<&Path>, predictions: Option<&Path>, out: &Path) -> Result<()> {
    let data = Dataset::load(data)?;
    let opts = EvalOptions::default();
    let report = match (model, predictions) {
        (Some(m), _) => evaluate(&MetroModel::load_dir(m)?, &data, opts)?,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| MetroError::io(p, e))?;
            let preds: Vec<Prediction> =
                serde_json::from_str(&text).map_err(|e| MetroError::Validation(format!("{}: {e}", p.display())))?;
            if preds.len() != data.len() {
                return Err(MetroError::Validation(format!(
                    "{} predictions for {} samples",
                    preds.len(),
                    data.len()
                )));
            }
            let reports = data
                .samples
                .iter()
                .zip(preds)
                .filter(|(s, _)| s.alpha)
                .map(|(s, p)| {
                    let out = ModelOutput {
                        joints3d: p.joints3d,
                        coarse_vertices3d: Vec::new(),
                        full_vertices3d: p.vertices,
                        camera: CameraParams {
                            scale: 1.0,
                            translation: [0.0, 0.0],
                        },
                        attention: Vec::new(),
                    };
                    if out.joints3d.len() != s.joints3d.len() || out.full_vertices3d.len() != s.vertices.len() {
                        return Err(MetroError::dim(
                            "prediction",
                            &[s.joints3d.len(), s.vertices.len()],
                            &[out.joints3d.len(), out.full_vertices3d.len()],
                        ));
                    }
                    sample_metrics(&out, s, opts)
                })
                .collect::<Result<Vec<_>>>()?;
            MetricReport::mean(&reports)?
        }
        (None, None) => return Err(MetroError::Config("eval needs --model or --predictions".into())),
    };
    let text = format!("{}\n{}\n", report.csv_header(), report.csv_row());
    write_artifact(out, "metrics.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn pick_sample(data: &Dataset, index: usize) -> Result<&metro_core::synth::TrainingSample> {
    data.samples
        .get(index)
        .ok_or_else(|| MetroError::Validation(format!("index {index} outside dataset of {}", data.len())))
}

#[derive(Serialize)]
struct CameraRecord {
    scale: f64,
    translation: [f64; 2],
}

fn infer_cmd(cfg: &RunConfig, model_dir: &Path, data: &Path, index: usize, tta: usize, out: &Path) -> Result<()> {
    let model = MetroModel::load_dir(model_dir)?;
    let data = Dataset::load(data)?;
    let sample = pick_sample(&data, index)?;
    let synth = synth_for(cfg, &data)?;
    let mesh = &synth.assets.mesh;
    let result = model.infer(&sample.model_input(), Retain::None)?;
    let full = if tta > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let range = AugmentRange { yaw: 0.3, scale: 0.1 };
        let mut transforms = vec![Augmentation {
            yaw: 0.0,
            scale_jitter: 1.0,
        }];
        transforms.extend((1..tta).map(|_| range.draw(&mut rng)));
        tta_infer(&model, &synth, sample, &transforms)?
    } else {
        result.full_vertices3d.clone()
    };
    fs::create_dir_all(out).map_err(|e| MetroError::io(out, e))?;
    save_obj(out.join("full.obj"), &full, &mesh.faces)?;
    let coarse_faces = mesh.coarse_faces.clone().unwrap_or_default();
    save_obj(out.join("coarse.obj"), &result.coarse_vertices3d, &coarse_faces)?;
    let cam = CameraRecord {
        scale: result.camera.scale,
        translation: result.camera.translation,
    };
    write_artifact(
        out,
        "camera.json",
        &serde_json::to_string_pretty(&cam).expect("camera serializes"),
    )?;
    println!("wrote full.obj, coarse.obj and camera.json to {}", out.display());
    Ok(())
}

fn attention_cmd(model_dir: &Path, data: &Path, index: usize, joints: &[String], out: &Path) -> Result<()> {
    let model = MetroModel::load_dir(model_dir)?;
    let data = Dataset::load(data)?;
    let sample = pick_sample(&data, index)?;
    let names = data.preset.skeleton().names;
    let result = model.infer(&sample.model_input(), Retain::All)?;
    let map = aggregate_attention(&result.attention.iter().collect::<Vec<_>>())?;
    map.save_csv(out.join("attention.csv"))?;
    map.save_pgm(out.join("attention.pgm"))?;
    for name in joints {
        let j = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MetroError::Validation(format!("unknown joint {name}; known: {}", names.join(","))))?;
        write_artifact(out, &format!("attention_{name}.csv"), &map.joint_row_csv(j))?;
    }
    println!("{0}x{0} attention map written to {1}", map.tokens, out.display());
    Ok(())
}

fn gradcheck_cmd(seed: u64, out: &Path) -> Result<()> {
    let rows = run_suite(seed)?;
    let table = format_table(&rows);
    write_artifact(out, "gradcheck.txt", &table)?;
    print!("{table}");
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(MetroError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn ablate_cmd(cfg: &RunConfig, sweep: Sweep, eval_n: usize, out: &Path) -> Result<()> {
    let synth = Synthesizer::new(cfg.data.clone())?;
    let train_set = synth.generate()?;
    let eval_synth = Synthesizer::new(SynthConfig {
        n: eval_n,
        seed: cfg.data.seed.wrapping_add(1),
        ..cfg.data.clone()
    })?;
    let eval_set = eval_synth.generate()?;
    let base = cfg.model.model_config(&synth, cfg.train.mvm_max_fraction)?;
    let setup = AblationSetup {
        template: &synth.assets.mesh,
        regressor: &synth.assets.regressor,
        train_set: &train_set,
        eval_set: &eval_set,
        train: &cfg.train,
        model_seed: cfg.train.seed,
    };
    let max_heads = cfg.model.max_heads;
    if matches!(sweep, Sweep::Mvm | Sweep::All) {
        let rows = ablate_mvm(&setup, &base, &MVM_CAPS)?;
        report_sweep(out, "mvm.csv", &ablation_csv("mvm_max_fraction", &rows))?;
    }
    if matches!(sweep, Sweep::Dims | Sweep::All) {
        let rows = ablate_dims(&setup, &base, max_heads)?;
        report_sweep(out, "dims.csv", &ablation_csv("scheme", &rows))?;
    }
    if matches!(sweep, Sweep::Positional | Sweep::All) {
        let rows = ablate_positional(&setup, &base)?;
        report_sweep(out, "positional.csv", &ablation_csv("positional", &rows))?;
    }
    Ok(())
}

fn report_sweep(out: &Path, name: &str, csv: &str) -> Result<()> {
    let p = write_artifact(out, name, csv)?;
    print!("{csv}");
    println!("wrote {}", p.display());
    Ok(())
}
