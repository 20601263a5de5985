use rand::seq::index::sample;
use rand::Rng;

use crate::datamodel::{FeatureMap, TargetField};
use crate::error::{Error, Result};
use crate::real::Real;

/// Floor on the product of flow norms in the cosine kernel.
pub const COS_EPS: f64 = 1e-8;

/// A similarity value and its partial derivatives in `(phi, u1, u2)` of
/// each argument.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimGrad {
    pub s: f64,
    pub da: [f64; 3],
    pub db: [f64; 3],
}

/// RBF kernel on the distances times cosine kernel on the flows.
pub fn similarity(a: [f64; 3], b: [f64; 3], sigma: f64) -> f64 {
    similarity_grad(a, b, sigma).s
}

pub fn similarity_grad(a: [f64; 3], b: [f64; 3], sigma: f64) -> SimGrad {
    let dphi = a[0] - b[0];
    let k = (-dphi * dphi / (2.0 * sigma)).exp();
    let (u, v) = ([a[1], a[2]], [b[1], b[2]]);
    let nu = u[0].hypot(u[1]);
    let nv = v[0].hypot(v[1]);
    let dot = u[0] * v[0] + u[1] * v[1];
    let prod = nu * nv;
    let den = prod.max(COS_EPS);
    let c = dot / den;
    let s = k * c;
    let dk = -k * dphi / sigma;
    let (mut du, mut dv) = ([v[0] / den, v[1] / den], [u[0] / den, u[1] / den]);
    if prod > COS_EPS {
        let (cu, cv) = (c / (nu * nu), c / (nv * nv));
        du = [du[0] - cu * u[0], du[1] - cu * u[1]];
        dv = [dv[0] - cv * v[0], dv[1] - cv * v[1]];
    }
    SimGrad {
        s,
        da: [dk * c, k * du[0], k * du[1]],
        db: [-dk * c, k * dv[0], k * dv[1]],
    }
}

fn feat<T: Real>(z: &FeatureMap<T>, i: usize) -> [f64; 3] {
    [z.phi[i].f64(), z.u1[i].f64(), z.u2[i].f64()]
}

fn add_feat<T: Real>(g: &mut FeatureMap<T>, i: usize, d: [f64; 3], scale: f64) {
    g.phi[i] += T::of(d[0] * scale);
    g.u1[i] += T::of(d[1] * scale);
    g.u2[i] += T::of(d[2] * scale);
}

/// Cell-interior pixels (`d > 0`, `b = 0`) in row-major order.
pub fn interior_pixels(t: &TargetField) -> Vec<usize> {
    (0..t.len()).filter(|&i| t.d[i] > 0.0 && t.b[i] == 0).collect()
}

/// First index attaining the maximum score.
pub fn argmax_first(scored: impl IntoIterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scored {
        match best {
            Some((bi, bs)) if s < bs || (s == bs && i > bi) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Keeps entries with score below `delta`, the `n` largest first.
pub fn hardest_below(mut scored: Vec<(usize, f64)>, delta: f64, n: usize) -> Vec<usize> {
    scored.retain(|&(_, s)| s < delta);
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(n);
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Source pixel among `candidates` whose features best match `label`.
pub fn mine_positive<T: Real>(
    label: [f64; 3],
    source: &FeatureMap<T>,
    candidates: &[usize],
    sigma: f64,
) -> Result<usize> {
    argmax_first(candidates.iter().map(|&i| (i, similarity(feat(source, i), label, sigma))))
        .ok_or_else(|| Error::Mining("source image has no cell-interior pixels".into()))
}

/// Up to `n` hard negatives for the positive at `positive`.
pub fn mine_negatives<T: Real>(
    positive: usize,
    source: &FeatureMap<T>,
    candidates: &[usize],
    sigma: f64,
    delta: f64,
    n: usize,
) -> Vec<usize> {
    let p = feat(source, positive);
    let scored = candidates
        .iter()
        .filter(|&&i| i != positive)
        .map(|&i| (i, similarity(p, feat(source, i), sigma)))
        .collect();
    hardest_below(scored, delta, n)
}

/// One anchor of the distance/flow contrastive term with frozen mining.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdTriple {
    pub target: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Samples up to `n_anchors` target interior pixels and mines a positive
/// and negatives for each against `mining` (source features).
#[allow(clippy::too_many_arguments)]
pub fn sample_cd_plan<T: Real, R: Rng>(
    target: &TargetField,
    mining: &FeatureMap<T>,
    source_candidates: &[usize],
    n_anchors: usize,
    sigma: f64,
    delta: f64,
    n_negatives: usize,
    rng: &mut R,
) -> Result<Vec<CdTriple>> {
    let anchors = interior_pixels(target);
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    let take = n_anchors.min(anchors.len());
    let mut picked: Vec<usize> = sample(rng, anchors.len(), take).into_iter().map(|k| anchors[k]).collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|ti| {
            let label = [target.d[ti] as f64, target.gx[ti] as f64, target.gy[ti] as f64];
            let positive = mine_positive(label, mining, source_candidates, sigma)?;
            let negatives = mine_negatives(positive, mining, source_candidates, sigma, delta, n_negatives);
            Ok(CdTriple {
                target: ti,
                positive,
                negatives,
            })
        })
        .collect()
}

/// `-log softmax` of the positive logit among positive and negatives.
pub fn cd_term(s_pos: f64, s_neg: &[f64], tau: f64) -> f64 {
    let l0 = s_pos / tau;
    let max = s_neg.iter().map(|s| s / tau).fold(l0, f64::max);
    let denom: f64 = (l0 - max).exp() + s_neg.iter().map(|s| (s / tau - max).exp()).sum::<f64>();
    -(l0 - max) + denom.ln()
}

/// Distance/flow contrastive loss averaged over the plan's anchors, with
/// gradients for the target and source feature maps.
pub fn loss_cd<T: Real>(
    target: &FeatureMap<T>,
    source: &FeatureMap<T>,
    plan: &[CdTriple],
    tau: f64,
    sigma: f64,
) -> (T, FeatureMap<T>, FeatureMap<T>) {
    let mut gt = FeatureMap::zeros(target.h, target.w);
    let mut gs = FeatureMap::zeros(source.h, source.w);
    if plan.is_empty() {
        return (T::zero(), gt, gs);
    }
    let inv_b = 1.0 / plan.len() as f64;
    let mut total = 0.0;
    for tri in plan {
        let t = feat(target, tri.target);
        let pos = similarity_grad(t, feat(source, tri.positive), sigma);
        let negs: Vec<SimGrad> = tri
            .negatives
            .iter()
            .map(|&n| similarity_grad(t, feat(source, n), sigma))
            .collect();
        let s_neg: Vec<f64> = negs.iter().map(|g| g.s).collect();
        total += cd_term(pos.s, &s_neg, tau);
        let max = s_neg.iter().fold(pos.s, |a, &b| a.max(b)) / tau;
        let e0 = (pos.s / tau - max).exp();
        let en: Vec<f64> = s_neg.iter().map(|s| (s / tau - max).exp()).collect();
        let z = e0 + en.iter().sum::<f64>();
        // dL/ds = (softmax - onehot) / tau
        let w0 = (e0 / z - 1.0) / tau * inv_b;
        add_feat(&mut gt, tri.target, pos.da, w0);
        add_feat(&mut gs, tri.positive, pos.db, w0);
        for ((g, &n), e) in negs.iter().zip(&tri.negatives).zip(&en) {
            let wn = e / z / tau * inv_b;
            add_feat(&mut gt, tri.target, g.da, wn);
            add_feat(&mut gs, n, g.db, wn);
        }
    }
    (T::of(total * inv_b), gt, gs)
}

/// Boundary-score pairs `(target pixel, source pixel)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CbPairs {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

/// Samples up to `per_class` same-label and different-label pairs. Every
/// fourth anchor is drawn from target boundary pixels when there are any,
/// the rest uniformly.
pub fn sample_cb_pairs<R: Rng>(target_b: &[u8], source_b: &[u8], per_class: usize, rng: &mut R) -> CbPairs {
    let mut out = CbPairs::default();
    if target_b.is_empty() || source_b.is_empty() {
        return out;
    }
    let t_border: Vec<usize> = (0..target_b.len()).filter(|&i| target_b[i] != 0).collect();
    let s_by: [Vec<usize>; 2] = [
        (0..source_b.len()).filter(|&i| source_b[i] == 0).collect(),
        (0..source_b.len()).filter(|&i| source_b[i] != 0).collect(),
    ];
    for same in [true, false] {
        for k in 0..per_class {
            let anchor = if k % 4 == 0 && !t_border.is_empty() {
                t_border[rng.gen_range(0..t_border.len())]
            } else {
                rng.gen_range(0..target_b.len())
            };
            let label = usize::from(target_b[anchor] != 0);
            let pool = &s_by[if same { label } else { 1 - label }];
            if pool.is_empty() {
                continue;
            }
            let partner = pool[rng.gen_range(0..pool.len())];
            if same {
                out.positive.push((anchor, partner));
            } else {
                out.negative.push((anchor, partner));
            }
        }
    }
    out
}

/// Boundary contrastive loss: squared difference on same-label pairs plus
/// `lambda` times the squared hinge at `margin` on different-label pairs,
/// each averaged over its pair set.
pub fn loss_cb<T: Real>(
    target: &FeatureMap<T>,
    source: &FeatureMap<T>,
    pairs: &CbPairs,
    margin: f64,
    lambda: f64,
) -> (T, FeatureMap<T>, FeatureMap<T>) {
    let mut gt = FeatureMap::zeros(target.h, target.w);
    let mut gs = FeatureMap::zeros(source.h, source.w);
    let mut total = 0.0;
    if !pairs.positive.is_empty() {
        let inv = 1.0 / pairs.positive.len() as f64;
        for &(ti, si) in &pairs.positive {
            let diff = target.z[ti].f64() - source.z[si].f64();
            total += 0.5 * diff * diff * inv;
            gt.z[ti] += T::of(diff * inv);
            gs.z[si] -= T::of(diff * inv);
        }
    }
    if !pairs.negative.is_empty() {
        let inv = lambda / pairs.negative.len() as f64;
        for &(ti, si) in &pairs.negative {
            let diff = target.z[ti].f64() - source.z[si].f64();
            let gap = margin - diff.abs();
            if gap > 0.0 {
                total += 0.5 * gap * gap * inv;
                let sign = if diff >= 0.0 { 1.0 } else { -1.0 };
                let g = -gap * sign * inv;
                gt.z[ti] += T::of(g);
                gs.z[si] -= T::of(g);
            }
        }
    }
    (T::of(total), gt, gs)
}
