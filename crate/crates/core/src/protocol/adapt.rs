use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::scale::ShotSet;
use super::train::{accumulate_is, zero_grads};
use crate::datamodel::{Dataset, TargetField};
use crate::error::{Error, Result};
use crate::labelgen::make_targets;
use crate::losses::{loss_adapt, AdaptConfig, LossConfig};
use crate::net::{radam_step, OptimState, Params, RadamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSchedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub wd: f64,
    pub seed: u64,
    pub augment: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdaptSchedule {
    fn default() -> Self {
        AdaptSchedule {
            phase1_epochs: 5,
            phase2_epochs: 5,
            lr1: 0.003,
            lr2: 1e-7,
            wd: 1e-5,
            seed: 0,
            augment: true,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adapt,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub is: f64,
    pub cb: f64,
    pub cd: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// One epoch of `(source image, shot)` pairs: sources in shuffled order,
/// shots drawn without replacement from a shuffled pool that is refilled
/// and reshuffled whenever it runs dry.
pub fn pair_schedule(n_source: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n_source).collect();
    order.shuffle(rng);
    let mut pool: Vec<usize> = Vec::new();
    order
        .into_iter()
        .map(|s| {
            if pool.is_empty() {
                pool = (0..k).collect();
                pool.shuffle(rng);
            }
            (s, pool.pop().expect("pool refilled"))
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub struct Adapted {
    pub params: Params<f32>,
    pub log: Vec<AdaptEpochLog>,
}

/// Two-phase K-shot adaptation. Phase 1 pairs every source image with a
/// shot and minimizes the adaptation objective; phase 2 fine-tunes on the
/// shots alone with the segmentation loss. Each phase starts with a fresh
/// optimizer state.
pub fn adapt(
    pretrained: &Params<f32>,
    source: &Dataset,
    shots: &ShotSet,
    acfg: &AdaptConfig,
    loss: &LossConfig,
    sched: &AdaptSchedule,
) -> Result<Adapted> {
    acfg.validate()?;
    loss.validate()?;
    if shots.patches.is_empty() {
        return Err(Error::Config("adaptation needs at least one shot".into()));
    }
    let mut params = pretrained.clone();
    let src_t: Vec<TargetField> = source.items.iter().map(|s| make_targets(&s.mask)).collect();
    let shot_t: Vec<TargetField> = shots.patches.iter().map(|s| make_targets(&s.mask)).collect();
    let mut pair_rng = stream(sched.seed, 1);
    let mut aug_rng = stream(sched.seed, 2);
    let mut loss_rng = stream(sched.seed, 3);
    let mut grads = params.zero_grads();
    let mut log = Vec::new();

    let mut optim = OptimState::new(&params);
    let radam1 = RadamConfig {
        lr: sched.lr1,
        weight_decay: sched.wd,
        max_grad_norm: sched.max_grad_norm,
        ..RadamConfig::default()
    };
    for epoch in 1..=sched.phase1_epochs {
        let mut entry = AdaptEpochLog {
            phase: Phase::Adapt,
            epoch,
            loss: 0.0,
            is: 0.0,
            cb: 0.0,
            cd: 0.0,
            steps: 0,
            skipped: 0,
        };
        for (si, ki) in pair_schedule(source.len(), shots.patches.len(), &mut pair_rng) {
            let shot = &shots.patches[ki];
            let (img, t) = if sched.augment {
                augment(&shot.image, &shot_t[ki], &mut aug_rng)?
            } else {
                (shot.image.clone(), shot_t[ki].clone())
            };
            zero_grads(&mut grads);
            let terms = match loss_adapt(
                &params,
                (&img, &t),
                (&source.items[si].image, &src_t[si]),
                loss,
                acfg,
                &mut loss_rng,
                &mut grads,
            ) {
                Ok(terms) => terms,
                Err(Error::Mining(m)) => {
                    log::debug!("skipping source {si}: {m}");
                    entry.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "adaptation diverged at epoch {epoch}, step {}",
                    entry.steps
                )));
            }
            radam_step(&mut params, &grads, &mut optim, &radam1)?;
            entry.steps += 1;
            entry.loss += terms.total;
            entry.is += terms.is;
            entry.cb += terms.cb;
            entry.cd += terms.cd;
        }
        if entry.skipped * 2 > entry.steps + entry.skipped {
            log::warn!("adaptation epoch {epoch}: {} of {} pairs skipped by mining", entry.skipped, source.len());
        }
        let n = entry.steps.max(1) as f64;
        entry.loss /= n;
        entry.is /= n;
        entry.cb /= n;
        entry.cd /= n;
        log.push(entry);
    }

    let mut optim = OptimState::new(&params);
    let radam2 = RadamConfig {
        lr: sched.lr2,
        weight_decay: sched.wd,
        max_grad_norm: sched.max_grad_norm,
        ..RadamConfig::default()
    };
    let mut order: Vec<usize> = (0..shots.patches.len()).collect();
    for epoch in 1..=sched.phase2_epochs {
        order.shuffle(&mut pair_rng);
        let mut total = 0.0;
        for &ki in &order {
            let shot = &shots.patches[ki];
            let (img, t) = if sched.augment {
                augment(&shot.image, &shot_t[ki], &mut aug_rng)?
            } else {
                (shot.image.clone(), shot_t[ki].clone())
            };
            zero_grads(&mut grads);
            let l = accumulate_is(&params, &img, &t, loss, &mut grads)?;
            radam_step(&mut params, &grads, &mut optim, &radam2)?;
            total += l;
        }
        log.push(AdaptEpochLog {
            phase: Phase::Finetune,
            epoch,
            loss: total / order.len() as f64,
            is: total / order.len() as f64,
            cb: 0.0,
            cd: 0.0,
            steps: order.len(),
            skipped: 0,
        });
    }
    Ok(Adapted { params, log })
}
