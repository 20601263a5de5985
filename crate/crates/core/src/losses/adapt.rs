use rand::Rng;

use super::contrastive::{interior_pixels, loss_cb, loss_cd, sample_cb_pairs, sample_cd_plan, CbPairs, CdTriple};
use super::{loss_is, AdaptConfig, LossConfig, MiningMode};
use crate::datamodel::{FeatureMap, Image, TargetField};
use crate::error::{Error, Result};
use crate::net::{backward, forward, predict, Grads, Params};
use crate::real::Real;

/// Frozen sampling and mining decisions for one (target, source) pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdaptPlan {
    pub cd: Vec<CdTriple>,
    pub cb: CbPairs,
}

/// Loss components of one adaptation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdaptTerms {
    pub is: f64,
    pub cb: f64,
    pub cd: f64,
    /// `is` plus the weighted contrastive terms, scaled like `is` under
    /// [`Reduction::Mean`](super::Reduction::Mean).
    pub total: f64,
}

/// Samples anchors and pairs and mines positives and negatives.
/// `source_pred` is only read in [`MiningMode::Predicted`].
pub fn plan_adapt<T: Real, R: Rng>(
    target: &TargetField,
    source: &TargetField,
    source_pred: &FeatureMap<T>,
    cfg: &AdaptConfig,
    rng: &mut R,
) -> Result<AdaptPlan> {
    let candidates = interior_pixels(source);
    if candidates.is_empty() {
        return Err(Error::Mining("source image has no cell-interior pixels".into()));
    }
    let labels;
    let mining = match cfg.mining {
        MiningMode::Predicted => source_pred,
        MiningMode::Labels => {
            labels = FeatureMap::<T>::from_targets(source, 0.0);
            &labels
        }
    };
    let cd = if cfg.gamma2 > 0.0 {
        sample_cd_plan(
            target,
            mining,
            &candidates,
            cfg.pixels_per_pair,
            cfg.sigma_rbf,
            cfg.delta,
            cfg.n_negatives,
            rng,
        )?
    } else {
        Vec::new()
    };
    let cb = if cfg.gamma1 > 0.0 {
        sample_cb_pairs(&target.b, &source.b, cfg.pairs_per_class, rng)
    } else {
        CbPairs::default()
    };
    Ok(AdaptPlan { cd, cb })
}

/// Adaptation objective on already computed feature maps, with gradients
/// for the target and source maps.
pub fn adapt_loss_on_features<T: Real>(
    zt: &FeatureMap<T>,
    target: &TargetField,
    zs: &FeatureMap<T>,
    plan: &AdaptPlan,
    loss_cfg: &LossConfig,
    cfg: &AdaptConfig,
) -> Result<(AdaptTerms, FeatureMap<T>, FeatureMap<T>)> {
    let (is, mut gt) = loss_is(zt, target, loss_cfg)?;
    if !zs.is_finite() {
        return Err(Error::Numeric("non-finite source feature map".into()));
    }
    let (cb, mut gt_cb, mut gs) = loss_cb(zt, zs, &plan.cb, cfg.margin, cfg.lambda);
    let (cd, mut gt_cd, mut gs_cd) = loss_cd(zt, zs, &plan.cd, cfg.tau, cfg.sigma_rbf);
    let scale = loss_cfg.reduction.factor(zt.len());
    let (w1, w2) = (cfg.gamma1 * scale, cfg.gamma2 * scale);
    gt_cb.scale(T::of(w1));
    gt_cd.scale(T::of(w2));
    gt.add_assign(&gt_cb);
    gt.add_assign(&gt_cd);
    gs.scale(T::of(w1));
    gs_cd.scale(T::of(w2));
    gs.add_assign(&gs_cd);
    if cfg.detach_source {
        gs = FeatureMap::zeros(zs.h, zs.w);
    }
    let (is, cb, cd) = (is.f64(), cb.f64(), cd.f64());
    let terms = AdaptTerms {
        is,
        cb,
        cd,
        total: is + w1 * cb + w2 * cd,
    };
    Ok((terms, gt, gs))
}

/// One stochastic adaptation step's loss on a (shot, source) pair;
/// accumulates parameter gradients into `grads`. With both contrastive
/// weights at zero this is the segmentation loss on the shot alone and the
/// source image is never touched.
#[allow(clippy::too_many_arguments)]
pub fn loss_adapt<T: Real, R: Rng>(
    params: &Params<T>,
    shot: (&Image, &TargetField),
    source: (&Image, &TargetField),
    loss_cfg: &LossConfig,
    cfg: &AdaptConfig,
    rng: &mut R,
    grads: &mut Grads<T>,
) -> Result<AdaptTerms> {
    if cfg.gamma1 == 0.0 && cfg.gamma2 == 0.0 {
        let (zt, tape) = forward(params, shot.0)?;
        let (is, gt) = loss_is(&zt, shot.1, loss_cfg)?;
        backward(params, &tape, &gt, grads)?;
        let is = is.f64();
        return Ok(AdaptTerms {
            is,
            total: is,
            ..AdaptTerms::default()
        });
    }
    let plan = match cfg.mining {
        MiningMode::Predicted => plan_adapt(shot.1, source.1, &predict(params, source.0)?, cfg, rng)?,
        MiningMode::Labels => plan_adapt(shot.1, source.1, &FeatureMap::<T>::zeros(0, 0), cfg, rng)?,
    };
    loss_adapt_planned(params, shot, source, &plan, loss_cfg, cfg, grads)
}

/// [`loss_adapt`] with a fixed plan.
pub fn loss_adapt_planned<T: Real>(
    params: &Params<T>,
    shot: (&Image, &TargetField),
    source: (&Image, &TargetField),
    plan: &AdaptPlan,
    loss_cfg: &LossConfig,
    cfg: &AdaptConfig,
    grads: &mut Grads<T>,
) -> Result<AdaptTerms> {
    let (zt, tape_t) = forward(params, shot.0)?;
    let (zs, tape_s) = forward(params, source.0)?;
    let (terms, gt, gs) = adapt_loss_on_features(&zt, shot.1, &zs, plan, loss_cfg, cfg)?;
    backward(params, &tape_t, &gt, grads)?;
    if !cfg.detach_source {
        backward(params, &tape_s, &gs, grads)?;
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::InstanceMask;
    use crate::labelgen::make_targets;
    use crate::net::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Image, TargetField, Image, TargetField) {
        let mk = |off: usize| {
            let (h, w) = (16, 16);
            let mut raw = vec![0u32; h * w];
            let mut img = vec![0.8f32; h * w];
            for y in 3 + off..9 + off {
                for x in 2..12 {
                    raw[y * w + x] = 1;
                    img[y * w + x] = 0.25;
                }
            }
            let mask = InstanceMask::from_raw(h, w, raw).unwrap();
            (Image::new(h, w, img).unwrap(), make_targets(&mask))
        };
        let (a, ta) = mk(0);
        let (b, tb) = mk(4);
        (a, ta, b, tb)
    }

    #[test]
    fn zero_weights_reduce_to_segmentation_loss() {
        let (ti, tt, si, st) = pair();
        let p = Params::init(&ModelConfig { levels: 1, base_channels: 2 }, 1).unwrap();
        let cfg = AdaptConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            ..AdaptConfig::default()
        };
        let lc = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = p.zero_grads();
        let terms = loss_adapt(&p, (&ti, &tt), (&si, &st), &lc, &cfg, &mut rng, &mut g).unwrap();
        let (z, tape) = forward(&p, &ti).unwrap();
        let (is, dz) = loss_is(&z, &tt, &lc).unwrap();
        let mut g2 = p.zero_grads();
        backward(&p, &tape, &dz, &mut g2).unwrap();
        assert_eq!(terms.total, is as f64);
        assert_eq!(g, g2);
        assert_eq!(rng, ChaCha8Rng::seed_from_u64(0));
    }

    #[test]
    fn source_without_cells_is_a_mining_error() {
        let (_, tt, _, _) = pair();
        let empty = make_targets(&InstanceMask::empty(16, 16));
        let z = FeatureMap::<f64>::zeros(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            plan_adapt(&tt, &empty, &z, &AdaptConfig::default(), &mut rng),
            Err(Error::Mining(_))
        ));
    }

    #[test]
    fn detached_source_gets_no_gradient() {
        let (_, tt, _, st) = pair();
        let zt = FeatureMap::<f64>::from_targets(&tt, 1.0);
        let mut zs = FeatureMap::<f64>::from_targets(&st, 1.0);
        zs.phi.iter_mut().for_each(|v| *v += 0.3);
        let cfg = AdaptConfig {
            detach_source: true,
            ..AdaptConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = plan_adapt(&tt, &st, &zs, &cfg, &mut rng).unwrap();
        assert!(!plan.cd.is_empty() && !plan.cb.positive.is_empty());
        let (_, _, gs) = adapt_loss_on_features(&zt, &tt, &zs, &plan, &LossConfig::default(), &cfg).unwrap();
        assert!(gs.to_channels().iter().all(|&v| v == 0.0));
    }
}
