use serde::{Deserialize, Serialize};

use crate::error::{MetroError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Positional information appended to the image feature of every query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// 3D rest-pose coordinate of the joint or vertex.
    #[default]
    TemplateCoords,
    /// Three-value sinusoidal code of the token index.
    Sinusoidal,
}

/// Progressive-width encoder. Queries enter at `feature_dim + 3`; each block
/// first projects to its `hidden_dim` (when narrower), runs its layers at that
/// width, and a final linear map produces `output_dim` = 3 values per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub output_dim: usize,
    pub mvm_max_fraction: f64,
    pub positional_mode: PositionalMode,
}

/// Largest head count not above `max_heads` that divides `width`.
pub fn heads_for(width: usize, max_heads: usize) -> usize {
    (1..=max_heads.max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

impl EncoderConfig {
    /// `(H+3) → H/2 → H/4 → H/8 → 3`, three blocks of four layers and four heads.
    pub fn default_for(feature_dim: usize) -> Self {
        let widths = [feature_dim / 2, feature_dim / 4, feature_dim / 8];
        EncoderConfig {
            feature_dim,
            blocks: widths
                .iter()
                .map(|&w| BlockSpec {
                    hidden_dim: w,
                    layers: 4,
                    heads: 4,
                })
                .collect(),
            output_dim: 3,
            mvm_max_fraction: 0.3,
            positional_mode: PositionalMode::TemplateCoords,
        }
    }

    /// Builds a schedule from the intermediate widths between `H+3` and 3, splitting
    /// `total_layers` evenly across blocks. An empty list keeps every layer at `H+3`.
    pub fn from_widths(feature_dim: usize, widths: &[usize], total_layers: usize, max_heads: usize) -> Result<Self> {
        let dims: Vec<usize> = if widths.is_empty() {
            vec![feature_dim + 3]
        } else {
            widths.to_vec()
        };
        if total_layers == 0 || total_layers % dims.len() != 0 {
            return Err(MetroError::Config(format!(
                "{total_layers} layers cannot be split evenly over {} blocks",
                dims.len()
            )));
        }
        let per_block = total_layers / dims.len();
        let cfg = EncoderConfig {
            feature_dim,
            blocks: dims
                .iter()
                .map(|&w| BlockSpec {
                    hidden_dim: w,
                    layers: per_block,
                    heads: heads_for(w, max_heads),
                })
                .collect(),
            output_dim: 3,
            mvm_max_fraction: 0.3,
            positional_mode: PositionalMode::TemplateCoords,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + 3
    }

    pub fn last_hidden(&self) -> usize {
        self.blocks.last().map_or(self.input_dim(), |b| b.hidden_dim)
    }

    pub fn total_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers).sum()
    }

    /// Token widths from input to output, e.g. `[67, 32, 16, 8, 3]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        for b in &self.blocks {
            if b.hidden_dim != *w.last().unwrap() {
                w.push(b.hidden_dim);
            }
        }
        w.push(self.output_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(MetroError::Config("feature_dim must be positive".into()));
        }
        if self.output_dim != 3 {
            return Err(MetroError::Config("output_dim must be 3".into()));
        }
        if self.blocks.is_empty() {
            return Err(MetroError::Config("encoder needs at least one block".into()));
        }
        if !(0.0..=1.0).contains(&self.mvm_max_fraction) {
            return Err(MetroError::Config(format!(
                "mvm_max_fraction {} outside [0, 1]",
                self.mvm_max_fraction
            )));
        }
        let mut prev = self.input_dim() + 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.hidden_dim == 0 || b.hidden_dim >= prev {
                return Err(MetroError::Config(format!(
                    "block {i} width {} must be positive and narrower than the previous width",
                    b.hidden_dim
                )));
            }
            if b.layers == 0 {
                return Err(MetroError::Config(format!("block {i} has no layers")));
            }
            if b.heads == 0 || b.hidden_dim % b.heads != 0 {
                return Err(MetroError::Config(format!(
                    "block {i}: {} heads do not divide width {}",
                    b.heads, b.hidden_dim
                )));
            }
            prev = b.hidden_dim;
        }
        Ok(())
    }
}

/// How the global feature vector is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureExtractor {
    /// Feature vectors are supplied with every sample.
    #[default]
    Precomputed,
    /// Small convolutional network over a square grayscale raster, trained jointly.
    TinyCnn { image_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_joints: usize,
    pub num_coarse: usize,
    pub num_full: usize,
    pub encoder: EncoderConfig,
    pub upsampler_hidden: usize,
    pub feature_extractor: FeatureExtractor,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(num_joints: usize, num_coarse: usize, num_full: usize, encoder: EncoderConfig) -> Self {
        ModelConfig {
            num_joints,
            num_coarse,
            num_full,
            encoder,
            upsampler_hidden: 64,
            feature_extractor: FeatureExtractor::Precomputed,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_joints + self.num_coarse
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_joints == 0 || self.num_coarse == 0 || self.num_full == 0 {
            return Err(MetroError::Config("joint and vertex counts must be positive".into()));
        }
        if self.upsampler_hidden == 0 {
            return Err(MetroError::Config("upsampler_hidden must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(MetroError::Config("layer_norm_eps must be positive".into()));
        }
        if let FeatureExtractor::TinyCnn { image_size } = self.feature_extractor {
            if image_size < 40 {
                return Err(MetroError::Config("tiny_cnn needs images of at least 40 px".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}
