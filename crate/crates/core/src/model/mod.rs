//! The network: queries, progressive encoder, camera head and upsampler.

mod checkpoint;
mod config;
mod params;
mod queries;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{heads_for, BlockSpec, EncoderConfig, FeatureExtractor, ModelConfig, PositionalMode};
pub use params::{truncated_normal, ParamEntry, ParamId, ParamStore, ParamVars};
pub use queries::{
    assemble_queries, build_queries, positional_codes, sample_mask, sinusoidal_codes, template_codes, QuerySet,
};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MetroError, Result};
use crate::mesh::{JointRegressor, Point3, TemplateMesh};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

pub const POSITIONAL_BUFFER: &str = "buffer.positional";
pub const REGRESSOR_BUFFER: &str = "buffer.joint_regressor";

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// Camera bias: softplus maps the first entry to a unit scale.
    CameraBias,
    /// One-hot rows selecting each full vertex's nearest coarse vertex.
    NearestCoarse,
    Positional,
    Regressor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        init,
        trainable: !matches!(init, Init::Positional | Init::Regressor),
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, std: f64) {
    out.push(spec(format!("{prefix}.weight"), vec![din, dout], Init::Normal(std)));
    out.push(spec(format!("{prefix}.bias"), vec![dout], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push(spec(format!("{prefix}.bias"), vec![d], Init::Zeros));
}

/// Every parameter and buffer of a model, in registration order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let enc = &cfg.encoder;
    let h = enc.feature_dim;
    let mut out = Vec::new();
    if let FeatureExtractor::TinyCnn { .. } = cfg.feature_extractor {
        for (name, o, c, k) in [("cnn.conv1", 8, 1, 5), ("cnn.conv2", 16, 8, 3), ("cnn.conv3", h, 16, 3)] {
            let std = 1.0 / ((c * k * k) as f64).sqrt();
            out.push(spec(format!("{name}.weight"), vec![o, c, k, k], Init::Normal(std)));
            out.push(spec(format!("{name}.bias"), vec![o], Init::Zeros));
        }
    }
    out.push(spec("mask_token", vec![enc.input_dim()], Init::Normal(INIT_STD)));
    let mut width = enc.input_dim();
    for (b, block) in enc.blocks.iter().enumerate() {
        let d = block.hidden_dim;
        if d != width {
            // Width-reducing maps sit on the residual path; 0.02 would shrink the stream below the norm epsilon.
            let std = 1.0 / (width as f64).sqrt();
            linear_specs(&mut out, &format!("encoder.block{b}.proj"), width, d, std);
            width = d;
        }
        for l in 0..block.layers {
            let p = format!("encoder.block{b}.layer{l}");
            norm_specs(&mut out, &format!("{p}.ln1"), d);
            for m in ["q", "k", "v", "o"] {
                linear_specs(&mut out, &format!("{p}.attn.{m}"), d, d, INIT_STD);
            }
            norm_specs(&mut out, &format!("{p}.ln2"), d);
            linear_specs(&mut out, &format!("{p}.ffn.fc1"), d, 4 * d, INIT_STD);
            linear_specs(&mut out, &format!("{p}.ffn.fc2"), 4 * d, d, INIT_STD);
        }
    }
    norm_specs(&mut out, "encoder.ln_f", width);
    linear_specs(&mut out, "head.out", width, enc.output_dim, INIT_STD);
    out.push(spec("camera.weight", vec![width, 3], Init::Zeros));
    out.push(spec("camera.bias", vec![3], Init::CameraBias));
    let (m3, f3) = (3 * cfg.num_coarse, 3 * cfg.num_full);
    out.push(spec(
        "upsampler.linear",
        vec![cfg.num_full, cfg.num_coarse],
        Init::NearestCoarse,
    ));
    linear_specs(&mut out, "upsampler.fc1", m3, cfg.upsampler_hidden, INIT_STD);
    out.push(spec(
        "upsampler.fc2.weight",
        vec![cfg.upsampler_hidden, f3],
        Init::Zeros,
    ));
    out.push(spec("upsampler.fc2.bias", vec![f3], Init::Zeros));
    out.push(spec(POSITIONAL_BUFFER, vec![cfg.num_tokens(), 3], Init::Positional));
    out.push(spec(
        REGRESSOR_BUFFER,
        vec![cfg.num_joints, cfg.num_full],
        Init::Regressor,
    ));
    out
}

/// Input to one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Feature(Vec<f64>),
    /// Square grayscale raster, row-major.
    Image {
        size: usize,
        pixels: Vec<f64>,
    },
}

/// Which attention maps to keep in a [`ModelOutput`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Retain {
    #[default]
    None,
    LastLayer,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl CameraParams {
    pub fn project(&self, p: &Point3) -> [f64; 2] {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
        ]
    }
}

/// Per-head attention of one layer, each head a row-major `n×n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub heads: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl LayerAttention {
    pub fn head(&self, h: usize) -> &[f64] {
        let nn = self.tokens * self.tokens;
        &self.data[h * nn..(h + 1) * nn]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub joints3d: Vec<Point3>,
    pub coarse_vertices3d: Vec<Point3>,
    pub full_vertices3d: Vec<Point3>,
    pub camera: CameraParams,
    pub attention: Vec<LayerAttention>,
}

/// Graph nodes produced by [`MetroModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub tokens: Var,
    pub hidden_final: Var,
    /// Per-token 3D outputs, joints first.
    pub token_out: Var,
    pub joints: Var,
    pub coarse: Var,
    pub full: Var,
    pub cam_scale: Var,
    pub cam_trans: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetroModel {
    config: ModelConfig,
    params: ParamStore,
}

impl MetroModel {
    /// Fresh model for `template` and `regressor`, initialized from `seed`.
    pub fn init(config: ModelConfig, template: &TemplateMesh, regressor: &JointRegressor, seed: u64) -> Result<Self> {
        config.validate()?;
        template.validate()?;
        if template.num_coarse() != config.num_coarse
            || template.num_full() != config.num_full
            || regressor.num_joints() != config.num_joints
            || regressor.num_vertices() != config.num_full
        {
            return Err(MetroError::Config(format!(
                "config expects K={} M={} M_full={}, assets have K={} M={} M_full={}",
                config.num_joints,
                config.num_coarse,
                config.num_full,
                regressor.num_joints(),
                template.num_coarse(),
                template.num_full()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in layout(&config) {
            let value = match s.init {
                Init::Normal(std) => truncated_normal(&mut rng, s.shape.clone(), std),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::filled(s.shape.clone(), 1.0),
                Init::CameraBias => Tensor::vector(vec![inv_softplus_one(), 0.0, 0.0]),
                Init::NearestCoarse => {
                    let mut t = Tensor::zeros(s.shape.clone());
                    let m = config.num_coarse;
                    for (i, c) in template.nearest_coarse().into_iter().enumerate() {
                        t.data_mut()[i * m + c] = 1.0;
                    }
                    t
                }
                Init::Positional => positional_codes(config.encoder.positional_mode, template, regressor)?,
                Init::Regressor => regressor.matrix().clone(),
            };
            params.add(s.name, value, s.trainable)?;
        }
        params.round_to_f32();
        Ok(MetroModel { config, params })
    }

    /// Wraps an existing store after checking it against the config layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(MetroError::Validation(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, e) in specs.iter().zip(params.entries()) {
            if s.name != e.name || s.shape != e.value.shape() || s.trainable != e.trainable {
                return Err(MetroError::Validation(format!(
                    "parameter {} does not match layout entry {} {:?}",
                    e.name, s.name, s.shape
                )));
            }
        }
        JointRegressor::new(params.by_name(REGRESSOR_BUFFER).expect("layout").clone())?;
        Ok(MetroModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn regressor(&self) -> JointRegressor {
        JointRegressor::new(self.params.by_name(REGRESSOR_BUFFER).expect("layout").clone())
            .expect("validated on construction")
    }

    pub fn positional(&self) -> &Tensor {
        self.params.by_name(POSITIONAL_BUFFER).expect("layout")
    }

    pub fn mask_token(&self) -> &[f64] {
        self.params.by_name("mask_token").expect("layout").data()
    }

    /// Queries for feature `x` with the given masked slots (for inspection; `forward`
    /// builds the same values inside the graph).
    pub fn queries(&self, x: &[f64], masked: &[usize]) -> Result<QuerySet> {
        assemble_queries(x, self.positional(), self.config.num_joints, self.mask_token(), masked)
    }

    /// Builds the forward graph. `masked` lists query slots replaced by the mask token.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, input: &ModelInput, masked: &[usize]) -> Result<ForwardVars> {
        let x = self.feature(g, pv, input)?;
        let codes = g.constant(self.positional().clone());
        self.forward_from(g, pv, x, codes, masked)
    }

    /// Forward pass from a `1×H` feature node and explicit positional codes.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        codes: Var,
        masked: &[usize],
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let n = cfg.num_tokens();
        if g.shape(codes) != [n, 3] {
            return Err(MetroError::dim("positional codes", &[n, 3], g.shape(codes)));
        }
        if g.value(x).data().iter().any(|v| !v.is_finite()) {
            return Err(MetroError::Numeric("image feature has non-finite entries".into()));
        }
        let xb = g.broadcast_rows(x, n)?;
        let mut tokens = g.concat_cols(&[xb, codes])?;
        if !masked.is_empty() {
            tokens = g.replace_rows(tokens, self.p(pv, "mask_token"), masked)?;
        }
        let (hidden_final, attention) = self.encode(g, pv, tokens)?;
        let token_out = g.linear(hidden_final, self.p(pv, "head.out.weight"), self.p(pv, "head.out.bias"))?;
        let joints = g.slice_rows(token_out, 0, cfg.num_joints)?;
        let coarse = g.slice_rows(token_out, cfg.num_joints, cfg.num_coarse)?;
        let full = self.upsample(g, pv, coarse)?;
        let pooled = g.mean_rows(hidden_final);
        let cam = g.linear(pooled, self.p(pv, "camera.weight"), self.p(pv, "camera.bias"))?;
        let raw_s = g.slice_cols(cam, 0, 1)?;
        let cam_scale = g.softplus(raw_s);
        let cam_trans = g.slice_cols(cam, 1, 2)?;
        Ok(ForwardVars {
            tokens,
            hidden_final,
            token_out,
            joints,
            coarse,
            full,
            cam_scale,
            cam_trans,
            attention,
        })
    }

    /// Runs the encoder blocks over `(K+M)×(H+3)` tokens; returns the final
    /// normalized hidden states and every attention node.
    pub fn encode(&self, g: &mut Graph, pv: &ParamVars, tokens: Var) -> Result<(Var, Vec<Var>)> {
        let eps = self.config.layer_norm_eps;
        let mut h = tokens;
        let mut width = self.config.encoder.input_dim();
        let mut attention = Vec::new();
        for (b, block) in self.config.encoder.blocks.iter().enumerate() {
            if block.hidden_dim != width {
                let p = format!("encoder.block{b}.proj");
                h = g.linear(h, self.p(pv, &format!("{p}.weight")), self.p(pv, &format!("{p}.bias")))?;
                width = block.hidden_dim;
            }
            for l in 0..block.layers {
                let p = format!("encoder.block{b}.layer{l}");
                let a = self.norm(g, pv, h, &format!("{p}.ln1"), eps)?;
                let q = self.lin(g, pv, a, &format!("{p}.attn.q"))?;
                let k = self.lin(g, pv, a, &format!("{p}.attn.k"))?;
                let v = self.lin(g, pv, a, &format!("{p}.attn.v"))?;
                let att = g.attention(q, k, v, block.heads)?;
                attention.push(att);
                let o = self.lin(g, pv, att, &format!("{p}.attn.o"))?;
                h = g.add(h, o)?;
                let f = self.norm(g, pv, h, &format!("{p}.ln2"), eps)?;
                let f = self.lin(g, pv, f, &format!("{p}.ffn.fc1"))?;
                let f = g.gelu(f);
                let f = self.lin(g, pv, f, &format!("{p}.ffn.fc2"))?;
                h = g.add(h, f)?;
            }
        }
        let hidden_final = self.norm(g, pv, h, "encoder.ln_f", eps)?;
        Ok((hidden_final, attention))
    }

    /// Coarse `M×3` → full `M_full×3`: a learned linear vertex map plus an MLP residual
    /// over the flattened coordinates.
    pub fn upsample(&self, g: &mut Graph, pv: &ParamVars, coarse: Var) -> Result<Var> {
        let cfg = &self.config;
        let skip = g.matmul(self.p(pv, "upsampler.linear"), coarse)?;
        let flat = g.reshape(coarse, vec![1, 3 * cfg.num_coarse])?;
        let hdn = self.lin(g, pv, flat, "upsampler.fc1")?;
        let hdn = g.gelu(hdn);
        let res = self.lin(g, pv, hdn, "upsampler.fc2")?;
        let res = g.reshape(res, vec![cfg.num_full, 3])?;
        g.add(skip, res)
    }

    /// `1×H` feature node for `input`.
    pub fn feature(&self, g: &mut Graph, pv: &ParamVars, input: &ModelInput) -> Result<Var> {
        let h = self.config.encoder.feature_dim;
        match (input, self.config.feature_extractor) {
            (ModelInput::Feature(x), FeatureExtractor::Precomputed) => {
                if x.len() != h {
                    return Err(MetroError::dim("feature", &[h], &[x.len()]));
                }
                Ok(g.constant(Tensor::matrix(1, h, x.clone())?))
            }
            (ModelInput::Image { size, pixels }, FeatureExtractor::TinyCnn { image_size }) => {
                if *size != image_size || pixels.len() != size * size {
                    return Err(MetroError::dim("image", &[image_size, image_size], &[pixels.len()]));
                }
                let img = g.constant(Tensor::new(vec![1, *size, *size], pixels.clone())?);
                self.tiny_cnn(g, pv, img)
            }
            _ => Err(MetroError::Config(
                "input kind does not match the configured feature extractor".into(),
            )),
        }
    }

    fn tiny_cnn(&self, g: &mut Graph, pv: &ParamVars, img: Var) -> Result<Var> {
        let h = self.config.encoder.feature_dim;
        let c1 = g.conv2d(img, self.p(pv, "cnn.conv1.weight"), self.p(pv, "cnn.conv1.bias"), 2)?;
        let c1 = g.gelu(c1);
        let c1 = g.max_pool2d(c1, 2)?;
        let c2 = g.conv2d(c1, self.p(pv, "cnn.conv2.weight"), self.p(pv, "cnn.conv2.bias"), 1)?;
        let c2 = g.gelu(c2);
        let c2 = g.max_pool2d(c2, 2)?;
        let c3 = g.conv2d(c2, self.p(pv, "cnn.conv3.weight"), self.p(pv, "cnn.conv3.bias"), 1)?;
        let spatial = g.value(c3).len() / h;
        let flat = g.reshape(c3, vec![h, spatial])?;
        let flat = g.transpose(flat)?;
        Ok(g.mean_rows(flat))
    }

    fn p(&self, pv: &ParamVars, name: &str) -> Var {
        pv.get(
            self.params
                .id(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    fn lin(&self, g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(pv, &format!("{prefix}.weight"));
        let b = self.p(pv, &format!("{prefix}.bias"));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gain = self.p(pv, &format!("{prefix}.gain"));
        let bias = self.p(pv, &format!("{prefix}.bias"));
        g.layer_norm(x, gain, bias, eps)
    }

    /// Plain inference with no masking.
    pub fn infer(&self, input: &ModelInput, retain: Retain) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let fv = self.forward(&mut g, &pv, input, &[])?;
        Ok(self.extract(&g, &fv, retain))
    }

    /// Reads plain values out of a forward graph.
    pub fn extract(&self, g: &Graph, fv: &ForwardVars, retain: Retain) -> ModelOutput {
        let layers: &[Var] = match retain {
            Retain::None => &[],
            Retain::LastLayer => &fv.attention[fv.attention.len() - 1..],
            Retain::All => &fv.attention,
        };
        let attention = layers
            .iter()
            .map(|&a| {
                let p = g.attention_probs(a).expect("attention node");
                LayerAttention {
                    heads: p.heads,
                    tokens: p.tokens,
                    data: p.data.to_vec(),
                }
            })
            .collect();
        let t = g.value(fv.cam_trans).data();
        ModelOutput {
            joints3d: g.value(fv.joints).to_points(),
            coarse_vertices3d: g.value(fv.coarse).to_points(),
            full_vertices3d: g.value(fv.full).to_points(),
            camera: CameraParams {
                scale: g.value(fv.cam_scale).data()[0],
                translation: [t[0], t[1]],
            },
            attention,
        }
    }

    /// Writes `model.json` and `weights.mtro` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MetroError::io(dir, e))?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let cfg_path = dir.join("model.json");
        fs::write(&cfg_path, json).map_err(|e| MetroError::io(&cfg_path, e))?;
        write_checkpoint(dir.join("weights.mtro"), &self.config, &self.params)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join("model.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| MetroError::io(&cfg_path, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| MetroError::Config(format!("{}: {e}", cfg_path.display())))?;
        let params = read_checkpoint(dir.join("weights.mtro"), &config)?;
        MetroModel::from_params(config, params)
    }
}

/// `softplus(x) = 1` at `x = ln(e - 1)`.
fn inv_softplus_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}
