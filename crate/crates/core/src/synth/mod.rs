//! Synthetic ground truth: articulated skeletons, skinned capsule meshes,
//! projections, image features and dataset files.

mod body;
mod dataset;
mod features;
mod skeleton;

pub use body::{build_capsule_template, skin_mesh, validate_weights, CapsuleSpec, SkinWeights, SkinnedTemplate};
pub use dataset::{Dataset, SampleInput, TrainingSample, DATASET_MAGIC, DATASET_VERSION};
pub use features::{rasterize_silhouette, OracleMlp};
pub use skeleton::{axis_angle, Posed, Skeleton};

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MetroError, Result};
use crate::mesh::{build_coarse, JointRegressor, Point3, TemplateMesh};
use crate::model::{CameraParams, EncoderConfig, FeatureExtractor, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Body,
    Hand,
}

impl Preset {
    pub fn skeleton(self) -> Skeleton {
        match self {
            Preset::Body => Skeleton::body(),
            Preset::Hand => Skeleton::hand(),
        }
    }

    pub fn capsule_spec(self) -> CapsuleSpec {
        match self {
            Preset::Body => CapsuleSpec {
                ring_vertices: 16,
                rings_per_bone: 12,
                radii: vec![
                    0.12, 0.09, 0.075, 0.055, 0.09, 0.075, 0.055, 0.1, 0.05, 0.04, 0.1, 0.05, 0.04, 0.11,
                ],
                blend: 0.25,
            },
            Preset::Hand => {
                let mut radii = vec![0.03];
                for _ in 0..5 {
                    radii.extend([0.011, 0.009, 0.008, 0.007]);
                }
                CapsuleSpec {
                    ring_vertices: 8,
                    rings_per_bone: 5,
                    radii,
                    blend: 0.25,
                }
            }
        }
    }

    pub fn template_mesh(self) -> Result<SkinnedTemplate> {
        build_capsule_template(&self.skeleton(), &self.capsule_spec())
    }

    pub fn num_coarse(self) -> usize {
        match self {
            Preset::Body => 431,
            Preset::Hand => 195,
        }
    }

    /// Half-width of the square rendered into silhouettes, in projected units.
    pub fn image_extent(self) -> f64 {
        match self {
            Preset::Body => 1.3,
            Preset::Hand => 0.2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Preset::Body => 0,
            Preset::Hand => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Preset::Body),
            1 => Ok(Preset::Hand),
            _ => Err(MetroError::Validation(format!("unknown preset code {c}"))),
        }
    }
}

/// Skeleton, skinned template, coarse mesh and joint regressor of a preset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthAssets {
    pub preset: Preset,
    pub skeleton: Skeleton,
    pub skinned: SkinnedTemplate,
    pub mesh: TemplateMesh,
    pub regressor: JointRegressor,
    pub rest_joints: Vec<Point3>,
}

impl SynthAssets {
    pub fn new(preset: Preset) -> Result<Self> {
        let skeleton = preset.skeleton();
        let skinned = preset.template_mesh()?;
        let mesh = build_coarse(&skinned.vertices, &skinned.faces, preset.num_coarse())?;
        let (k, m) = (skeleton.num_joints(), skinned.vertices.len());
        let mut g = Tensor::zeros(vec![k, m]);
        for (j, ring) in skinned.joint_rings.iter().enumerate() {
            let w = 1.0 / ring.len() as f64;
            for &v in ring {
                g.data_mut()[j * m + v] = w;
            }
        }
        let regressor = JointRegressor::new(g)?;
        let rest_joints = skeleton.rest_positions();
        Ok(SynthAssets {
            preset,
            skeleton,
            skinned,
            mesh,
            regressor,
            rest_joints,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    pub fn num_full(&self) -> usize {
        self.mesh.num_full()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    OracleMlp,
    TinyCnn,
}

impl FeatureMode {
    pub fn code(self) -> u8 {
        match self {
            FeatureMode::OracleMlp => 0,
            FeatureMode::TinyCnn => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FeatureMode::OracleMlp),
            1 => Ok(FeatureMode::TinyCnn),
            _ => Err(MetroError::Validation(format!("unknown feature mode code {c}"))),
        }
    }
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub preset: Preset,
    pub n: usize,
    pub seed: u64,
    pub p_2d_only: f64,
    pub feature_mode: FeatureMode,
    pub feature_dim: usize,
    pub image_size: usize,
    /// Multiplier on the per-joint rotation limits.
    pub angle_scale: f64,
    /// Root rotation about the vertical axis is drawn from `±yaw_range` radians.
    pub yaw_range: f64,
    pub body_scale: [f64; 2],
    pub cam_scale: [f64; 2],
    pub cam_trans: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            preset: Preset::Body,
            n: 256,
            seed: 0,
            p_2d_only: 0.0,
            feature_mode: FeatureMode::OracleMlp,
            feature_dim: 64,
            image_size: 64,
            angle_scale: 1.0,
            yaw_range: 0.5,
            body_scale: [0.9, 1.1],
            cam_scale: [0.8, 1.2],
            cam_trans: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(MetroError::Config("n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_2d_only) {
            return Err(MetroError::Config(format!(
                "p_2d_only {} outside [0, 1]",
                self.p_2d_only
            )));
        }
        if self.feature_dim == 0 || self.image_size < 40 {
            return Err(MetroError::Config(
                "feature_dim must be positive and image_size ≥ 40".into(),
            ));
        }
        let ok_range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ok_range(self.body_scale) || !ok_range(self.cam_scale) {
            return Err(MetroError::Config("scale ranges must be positive and ordered".into()));
        }
        if self.angle_scale < 0.0 || self.yaw_range < 0.0 || self.cam_trans < 0.0 {
            return Err(MetroError::Config("pose ranges must be nonnegative".into()));
        }
        Ok(())
    }

    /// Width of one sample's model input.
    pub fn input_width(&self) -> usize {
        match self.feature_mode {
            FeatureMode::OracleMlp => self.feature_dim,
            FeatureMode::TinyCnn => self.image_size * self.image_size,
        }
    }
}

/// Pose, body scale and ground-truth camera of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub angles: Vec<Point3>,
    pub scale: f64,
    pub camera: CameraParams,
}

impl PoseParams {
    pub fn vector_len(num_joints: usize) -> usize {
        3 * num_joints + 4
    }

    /// `[angles…, scale, cam_s, cam_tx, cam_ty]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.angles.iter().flatten().copied().collect();
        v.extend([
            self.scale,
            self.camera.scale,
            self.camera.translation[0],
            self.camera.translation[1],
        ]);
        v
    }

    pub fn from_slice(v: &[f64], num_joints: usize) -> Result<Self> {
        if v.len() != Self::vector_len(num_joints) {
            return Err(MetroError::dim("pose", &[Self::vector_len(num_joints)], &[v.len()]));
        }
        let k3 = 3 * num_joints;
        Ok(PoseParams {
            angles: v[..k3].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            scale: v[k3],
            camera: CameraParams {
                scale: v[k3 + 1],
                translation: [v[k3 + 2], v[k3 + 3]],
            },
        })
    }

    /// Centered encoding fed to the oracle feature network.
    fn oracle_input(&self) -> Vec<f64> {
        let mut v = self.to_vec();
        let k3 = 3 * self.angles.len();
        v[k3] -= 1.0;
        v[k3 + 1] -= 1.0;
        v
    }
}

/// Global yaw rotation and scale jitter applied before featurization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub yaw: f64,
    pub scale_jitter: f64,
}

/// Draws poses and renders complete samples for one config.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub config: SynthConfig,
    pub assets: SynthAssets,
    oracle: OracleMlp,
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let assets = SynthAssets::new(config.preset)?;
        let oracle = OracleMlp::new(PoseParams::vector_len(assets.num_joints()), config.feature_dim);
        Ok(Synthesizer { config, assets, oracle })
    }

    /// Model config whose joint, vertex and input sizes match this generator.
    pub fn model_config(&self, mut encoder: EncoderConfig) -> ModelConfig {
        encoder.feature_dim = self.config.feature_dim;
        let a = &self.assets;
        let mut cfg = ModelConfig::new(a.num_joints(), a.mesh.num_coarse(), a.num_full(), encoder);
        if self.config.feature_mode == FeatureMode::TinyCnn {
            cfg.feature_extractor = FeatureExtractor::TinyCnn {
                image_size: self.config.image_size,
            };
        }
        cfg
    }

    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> PoseParams {
        let c = &self.config;
        let skel = &self.assets.skeleton;
        let root = skel.root();
        let angles = (0..skel.num_joints())
            .map(|j| {
                if j == root {
                    let yaw = if c.yaw_range > 0.0 {
                        rng.gen_range(-c.yaw_range..=c.yaw_range)
                    } else {
                        0.0
                    };
                    return [0.0, yaw, 0.0];
                }
                let axis = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let limit = skel.limits[j] * c.angle_scale;
                let angle = if limit > 0.0 { rng.gen_range(0.0..limit) } else { 0.0 };
                let n = axis.norm();
                if n == 0.0 {
                    [0.0; 3]
                } else {
                    (axis * (angle / n)).into()
                }
            })
            .collect();
        let range = |rng: &mut R, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let scale = range(rng, c.body_scale);
        let cam_s = range(rng, c.cam_scale);
        let t = c.cam_trans;
        let (tx, ty) = if t > 0.0 {
            (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
        } else {
            (0.0, 0.0)
        };
        PoseParams {
            angles,
            scale,
            camera: CameraParams {
                scale: cam_s,
                translation: [tx, ty],
            },
        }
    }

    /// Vertices and joints of a posed, scaled body.
    pub fn articulate(&self, pose: &PoseParams) -> Result<(Vec<Point3>, Vec<Point3>)> {
        let a = &self.assets;
        let posed = a.skeleton.pose(&pose.angles, pose.scale)?;
        let verts = skin_mesh(
            &a.skinned.vertices,
            &a.skinned.weights,
            &a.rest_joints,
            &posed,
            pose.scale,
        )?;
        Ok((verts, posed.positions))
    }

    pub fn realize(&self, pose: PoseParams, alpha: bool, beta: bool) -> Result<TrainingSample> {
        let (vertices, joints3d) = self.articulate(&pose)?;
        let joints2d = joints3d.iter().map(|p| pose.camera.project(p)).collect();
        let input = match self.config.feature_mode {
            FeatureMode::OracleMlp => SampleInput::Feature(self.oracle.embed(&pose.oracle_input())),
            FeatureMode::TinyCnn => SampleInput::Image(rasterize_silhouette(
                &vertices,
                &self.assets.skinned.faces,
                &pose.camera,
                self.config.image_size,
                self.config.preset.image_extent(),
            )),
        };
        Ok(TrainingSample {
            input,
            vertices,
            joints3d,
            joints2d,
            pose,
            alpha,
            beta,
        })
    }

    /// Rotates the root about the vertical axis and rescales the body, then
    /// regenerates every label and the input.
    pub fn augment(&self, sample: &TrainingSample, aug: Augmentation) -> Result<TrainingSample> {
        let mut pose = sample.pose.clone();
        let root = self.assets.skeleton.root();
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), aug.yaw) * axis_angle(&pose.angles[root]);
        pose.angles[root] = r.scaled_axis().into();
        pose.scale *= aug.scale_jitter;
        self.realize(pose, sample.alpha, sample.beta)
    }

    /// `n` samples; exactly `⌊p_2d_only·n⌋` of them are flagged 2D-only.
    pub fn generate(&self) -> Result<Dataset> {
        let c = &self.config;
        let n_2d = (c.p_2d_only * c.n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..c.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        order.shuffle(&mut rng);
        let mut two_d_only = vec![false; c.n];
        for &i in &order[..n_2d] {
            two_d_only[i] = true;
        }
        let samples = (0..c.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
                rng.set_stream(i as u64 + 1);
                let pose = self.sample_pose(&mut rng);
                self.realize(pose, !two_d_only[i], true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            preset: c.preset,
            feature_mode: c.feature_mode,
            num_joints: self.assets.num_joints(),
            num_full: self.assets.num_full(),
            input_dim: match c.feature_mode {
                FeatureMode::OracleMlp => c.feature_dim,
                FeatureMode::TinyCnn => c.image_size,
            },
            samples,
        })
    }
}
