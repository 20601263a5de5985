//! Small encoder-decoder producing the 4-channel feature map, with
//! hand-written reverse-mode gradients and the RAdam optimizer.

pub mod layers;
mod radam;
mod unet;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub use radam::{radam_step, rho, OptimState, RadamConfig};
pub use unet::{backward, forward, predict, Tape};

/// Output channels: distance, two flow components, border logit.
pub const OUT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of 2x downsamplings.
    pub levels: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 2,
            base_channels: 8,
        }
    }
}

/// One convolution's geometry and parameter slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("model needs at least one level".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("{} levels is unreasonably deep", self.levels)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Side lengths must be multiples of this; inputs are reflect-padded.
    pub fn stride(&self) -> usize {
        1 << self.levels
    }

    /// Convolutions in parameter order: encoder levels (the deepest one is
    /// the bottleneck), decoder levels from deep to shallow, then the head.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin, cout, kernel| {
            out.push(ConvSpec {
                name,
                cin,
                cout,
                kernel,
            })
        };
        for l in 0..=self.levels {
            let cin = if l == 0 { 1 } else { self.channels(l - 1) };
            conv(format!("enc.{l}.conv1"), cin, self.channels(l), 3);
            conv(format!("enc.{l}.conv2"), self.channels(l), self.channels(l), 3);
        }
        for l in (0..self.levels).rev() {
            let cin = self.channels(l + 1) + self.channels(l);
            conv(format!("dec.{l}.conv1"), cin, self.channels(l), 3);
            conv(format!("dec.{l}.conv2"), self.channels(l), self.channels(l), 3);
        }
        conv("head.conv".into(), self.channels(0), OUT_CHANNELS, 1);
        out
    }

    /// Recovers the architecture from checkpoint tensor names and shapes.
    pub fn infer(ckpt: &Checkpoint) -> Result<Self> {
        let w0 = ckpt
            .params
            .get("enc.0.conv1.w")
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: "checkpoint lacks enc.0.conv1.w".into(),
            })?;
        let base = *w0.dims.first().unwrap_or(&0) as usize;
        let levels = (0..)
            .take_while(|l| ckpt.params.contains_key(&format!("enc.{l}.conv1.w")))
            .count()
            .saturating_sub(1);
        let cfg = ModelConfig {
            levels,
            base_channels: base,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Network parameters in [`ModelConfig::convs`] order, weight then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub cfg: ModelConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

/// Gradients aligned with [`Params::tensors`].
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Real> Params<T> {
    fn shaped(cfg: &ModelConfig, mut fill: impl FnMut(&ConvSpec, bool, usize) -> Vec<T>) -> Self {
        let mut tensors = Vec::new();
        for spec in cfg.convs() {
            let wdims = vec![spec.cout, spec.cin, spec.kernel, spec.kernel];
            let wn = wdims.iter().product();
            tensors.push(ParamTensor {
                name: format!("{}.w", spec.name),
                data: fill(&spec, true, wn),
                dims: wdims,
            });
            tensors.push(ParamTensor {
                name: format!("{}.b", spec.name),
                data: fill(&spec, false, spec.cout),
                dims: vec![spec.cout],
            });
        }
        Params {
            cfg: cfg.clone(),
            tensors,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::shaped(cfg, |_, _, n| vec![T::zero(); n])
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            cfg: self.cfg.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    Tensor {
                        dims: t.dims.iter().map(|&d| d as u64).collect(),
                        data: t.data.iter().map(|&v| v.f64() as f32).collect(),
                    },
                )
            })
            .collect()
    }

    pub fn from_tensor_map(cfg: &ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = Self::zeros(cfg);
        for t in &mut params.tensors {
            let src = map
                .get(&t.name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {}", t.name)))?;
            let dims: Vec<usize> = src.dims.iter().map(|&d| d as usize).collect();
            if dims != t.dims {
                return Err(Error::Contract(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    t.name, dims, t.dims
                )));
            }
            t.data = src.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(params)
    }
}

impl Params<f32> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::shaped(cfg, |spec, is_weight, n| {
            if !is_weight {
                return vec![0.0; n];
            }
            let kk = spec.kernel * spec.kernel;
            let a = (6.0 / ((spec.cin * kk + spec.cout * kk) as f64)).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a) as f32).collect()
        }))
    }

    pub fn to_checkpoint(&self, optim: Option<&OptimState>, digest: [u8; 32], epoch: u64) -> Checkpoint {
        Checkpoint {
            params: self.tensor_map(),
            optim: optim.map(|o| o.tensor_map(self)).unwrap_or_default(),
            config_digest: digest,
            epoch,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::infer(ckpt)?;
        Self::from_tensor_map(&cfg, &ckpt.params)
    }
}

/// Builds an initial checkpoint for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Params::init(cfg, seed)?.to_checkpoint(None, [0; 32], 0))
}
