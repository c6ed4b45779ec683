//! Binary dataset files.
//!
//! Header (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4  | magic `MTDS` |
//! | 4  | version u32 |
//! | 1  | preset (0 body, 1 hand) |
//! | 1  | input kind (0 feature vector, 1 square image) |
//! | 2  | reserved, zero |
//! | 4  | K u32 |
//! | 4  | M_full u32 |
//! | 4  | H u32: feature width, or image side length |
//! | 4  | sample count u32 |
//!
//! Each record is `input (H or H² f64) | V (3·M_full f64) | J3D (3K f64) |
//! J2D (2K f64) | pose (3K + 4 f64) | alpha u8 | beta u8`.

use std::fs;
use std::path::Path;

use super::{FeatureMode, PoseParams, Preset};
use crate::error::{MetroError, Result};
use crate::mesh::Point3;
use crate::model::ModelInput;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MTDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    Feature(Vec<f64>),
    Image(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: SampleInput,
    pub vertices: Vec<Point3>,
    pub joints3d: Vec<Point3>,
    pub joints2d: Vec<[f64; 2]>,
    pub pose: PoseParams,
    pub alpha: bool,
    pub beta: bool,
}

impl TrainingSample {
    pub fn model_input(&self) -> ModelInput {
        match &self.input {
            SampleInput::Feature(x) => ModelInput::Feature(x.clone()),
            SampleInput::Image(px) => ModelInput::Image {
                size: (px.len() as f64).sqrt().round() as usize,
                pixels: px.clone(),
            },
        }
    }

    pub fn joints2d_tensor(&self) -> Tensor {
        let data = self.joints2d.iter().flatten().copied().collect();
        Tensor::matrix(self.joints2d.len(), 2, data).expect("nonempty joints")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub preset: Preset,
    pub feature_mode: FeatureMode,
    pub num_joints: usize,
    pub num_full: usize,
    pub input_dim: usize,
    pub samples: Vec<TrainingSample>,
}

fn put_f64s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MetroError::Validation("dataset file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn points(&mut self, n: usize) -> Result<Vec<Point3>> {
        Ok(self.f64s(3 * n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(MetroError::Validation(format!("invalid flag byte {b}"))),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn input_len(&self) -> usize {
        match self.feature_mode {
            FeatureMode::OracleMlp => self.input_dim,
            FeatureMode::TinyCnn => self.input_dim * self.input_dim,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&[self.preset.code(), self.feature_mode.code(), 0, 0]);
        for v in [self.num_joints, self.num_full, self.input_dim, self.samples.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            match &s.input {
                SampleInput::Feature(x) | SampleInput::Image(x) => put_f64s(&mut out, x.iter().copied()),
            }
            put_f64s(&mut out, s.vertices.iter().flatten().copied());
            put_f64s(&mut out, s.joints3d.iter().flatten().copied());
            put_f64s(&mut out, s.joints2d.iter().flatten().copied());
            put_f64s(&mut out, s.pose.to_vec());
            out.push(s.alpha as u8);
            out.push(s.beta as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(MetroError::Validation("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION as usize {
            return Err(MetroError::Validation(format!("unsupported dataset version {version}")));
        }
        let preset = Preset::from_code(r.u8()?)?;
        let feature_mode = FeatureMode::from_code(r.u8()?)?;
        r.take(2)?;
        let (k, m, h, n) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let mut ds = Dataset {
            preset,
            feature_mode,
            num_joints: k,
            num_full: m,
            input_dim: h,
            samples: Vec::with_capacity(n),
        };
        let input_len = ds.input_len();
        for _ in 0..n {
            let x = r.f64s(input_len)?;
            let input = match feature_mode {
                FeatureMode::OracleMlp => SampleInput::Feature(x),
                FeatureMode::TinyCnn => SampleInput::Image(x),
            };
            let vertices = r.points(m)?;
            let joints3d = r.points(k)?;
            let joints2d = r.f64s(2 * k)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            let pose = PoseParams::from_slice(&r.f64s(PoseParams::vector_len(k))?, k)?;
            let alpha = r.flag()?;
            let beta = r.flag()?;
            ds.samples.push(TrainingSample {
                input,
                vertices,
                joints3d,
                joints2d,
                pose,
                alpha,
                beta,
            });
        }
        if r.pos != bytes.len() {
            return Err(MetroError::Validation("trailing bytes after dataset".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MetroError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MetroError::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }

    /// A copy holding only the samples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Dataset {
            preset: self.preset,
            feature_mode: self.feature_mode,
            num_joints: self.num_joints,
            num_full: self.num_full,
            input_dim: self.input_dim,
            samples: Vec::new(),
        }
    }
}
