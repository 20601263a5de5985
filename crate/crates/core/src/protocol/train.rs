use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use crate::datamodel::{Dataset, Image, Sample, TargetField};
use crate::error::{Error, Result};
use crate::labelgen::make_targets;
use crate::losses::{loss_is, LossConfig};
use crate::net::{backward, forward, radam_step, Grads, OptimState, Params, RadamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub wd: f64,
    /// Side of the random training crops.
    pub patch: usize,
    pub seed: u64,
    pub augment: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.03,
            epochs: 30,
            batch: 4,
            wd: 1e-5,
            patch: 64,
            seed: 0,
            augment: true,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.patch < 8 || self.wd < 0.0 {
            return Err(Error::Config(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }

    pub fn radam(&self) -> RadamConfig {
        RadamConfig {
            lr: self.lr,
            weight_decay: self.wd,
            max_grad_norm: self.max_grad_norm,
            ..RadamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
}

pub struct Trained {
    pub params: Params<f32>,
    pub optim: OptimState,
    pub log: Vec<EpochLog>,
}

/// Random `patch`-sided crop (whole axis when shorter) with its targets.
pub fn random_crop<R: Rng>(s: &Sample, patch: usize, rng: &mut R) -> Result<(Image, TargetField)> {
    let (h, w) = s.image.shape();
    let (ph, pw) = (patch.min(h), patch.min(w));
    let y0 = rng.gen_range(0..=h - ph);
    let x0 = rng.gen_range(0..=w - pw);
    if (ph, pw) == (h, w) {
        return Ok((s.image.clone(), make_targets(&s.mask)));
    }
    let mask = s.mask.crop(y0, x0, ph, pw)?;
    Ok((s.image.crop(y0, x0, ph, pw)?, make_targets(&mask)))
}

/// Forward, segmentation loss and backward on one example; accumulates
/// gradients and returns the loss.
pub fn accumulate_is(
    params: &Params<f32>,
    img: &Image,
    t: &TargetField,
    loss: &LossConfig,
    grads: &mut Grads<f32>,
) -> Result<f64> {
    let (z, tape) = forward(params, img)?;
    let (l, dz) = loss_is(&z, t, loss)?;
    backward(params, &tape, &dz, grads)?;
    Ok(l as f64)
}

pub fn scale_grads(grads: &mut Grads<f32>, s: f32) {
    grads.iter_mut().flatten().for_each(|g| *g *= s);
}

pub fn zero_grads(grads: &mut Grads<f32>) {
    grads.iter_mut().flatten().for_each(|g| *g = 0.0);
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training diverged at epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

/// Minimizes the segmentation loss over random crops of `ds` with RAdam.
/// Zero epochs returns the parameters unchanged.
pub fn pretrain(params: Params<f32>, ds: &Dataset, cfg: &TrainConfig, loss: &LossConfig) -> Result<Trained> {
    cfg.validate()?;
    loss.validate()?;
    let mut params = params;
    let mut optim = OptimState::new(&params);
    let radam = cfg.radam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = params.zero_grads();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch) {
            zero_grads(&mut grads);
            for &i in batch {
                let (img, t) = random_crop(&ds.items[i], cfg.patch, &mut rng)?;
                let (img, t) = if cfg.augment { augment(&img, &t, &mut rng)? } else { (img, t) };
                let l = accumulate_is(&params, &img, &t, loss, &mut grads).map_err(|e| diverged(epoch, steps, e))?;
                if !l.is_finite() {
                    return Err(diverged(epoch, steps, Error::Numeric(format!("loss {l}"))));
                }
                total += l;
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f32);
            radam_step(&mut params, &grads, &mut optim, &radam).map_err(|e| diverged(epoch, steps, e))?;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: total / ds.len() as f64,
            steps,
        };
        log::debug!("epoch {epoch}: loss {:.4}", entry.loss);
        log.push(entry);
    }
    Ok(Trained { params, optim, log })
}

/// Mean segmentation loss of `params` over whole images of `ds`.
pub fn dataset_loss(params: &Params<f32>, ds: &Dataset, loss: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in &ds.items {
        let (z, _) = forward(params, &s.image)?;
        total += loss_is(&z, &make_targets(&s.mask), loss)?.0 as f64;
    }
    Ok(total / ds.len() as f64)
}
