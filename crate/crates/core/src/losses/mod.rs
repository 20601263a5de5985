//! Training objectives: the per-pixel segmentation loss with its
//! distance/flow consistency term, and the contrastive adaptation losses.

mod adapt;
mod contrastive;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureMap, TargetField};
use crate::error::{Error, Result};
use crate::real::Real;

pub use adapt::{adapt_loss_on_features, loss_adapt, loss_adapt_planned, plan_adapt, AdaptPlan, AdaptTerms};
pub use contrastive::{
    argmax_first, cd_term, hardest_below, interior_pixels, loss_cb, loss_cd, mine_negatives,
    mine_positive, sample_cb_pairs, sample_cd_plan, similarity, similarity_grad, CbPairs, CdTriple,
    SimGrad, COS_EPS,
};

/// BCE clamps the predicted probability into `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;
/// Floor on the predicted-gradient norm in the consistency term.
pub const IVP_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum the per-pixel terms.
    #[default]
    Sum,
    /// The summed objective divided by the image's pixel count. Relative
    /// weights of all terms are those of [`Reduction::Sum`].
    Mean,
}

impl Reduction {
    /// Factor applied to the summed objective of an image with `n` pixels.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the flow term.
    pub nu: f64,
    /// Weight of the border cross-entropy.
    pub mu: f64,
    pub ivp_weight: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            nu: 0.5,
            mu: 1.0,
            ivp_weight: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.nu, self.mu, self.ivp_weight].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be >= 0: {self:?}")))
        }
    }
}

/// Which features positives and negatives are mined from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Source predictions are matched against the target label.
    #[default]
    Predicted,
    /// Source labels are matched against the target label.
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub tau: f64,
    pub margin: f64,
    pub n_negatives: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma_rbf: f64,
    pub delta: f64,
    pub lambda: f64,
    pub pixels_per_pair: usize,
    pub pairs_per_class: usize,
    #[serde(default)]
    pub mining: MiningMode,
    /// Stop gradients from flowing into the source image's features.
    #[serde(default)]
    pub detach_source: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            tau: 0.1,
            margin: 10.0,
            n_negatives: 20,
            gamma1: 0.05,
            gamma2: 0.05,
            sigma_rbf: 2.0,
            delta: 0.5,
            lambda: 1.0,
            pixels_per_pair: 256,
            pairs_per_class: 512,
            mining: MiningMode::Predicted,
            detach_source: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.margin > 0.0
            && self.n_negatives >= 1
            && self.sigma_rbf > 0.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.gamma1 >= 0.0
            && self.gamma2 >= 0.0
            && self.lambda >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid adaptation config: {self:?}")))
        }
    }
}

fn check_shapes<T: Real>(z: &FeatureMap<T>, t: &TargetField) -> Result<()> {
    if (z.h, z.w) != (t.h, t.w) {
        return Err(Error::Contract(format!(
            "features {}x{} vs targets {}x{}",
            z.h, z.w, t.h, t.w
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against label `b`, with the clamped
/// probability, and its derivative in `z` (zero inside the clamp).
pub fn bce_with_grad(z: f64, b: f64) -> (f64, f64) {
    let s = sigmoid(z);
    let sc = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let loss = -(b * sc.ln() + (1.0 - b) * (1.0 - sc).ln());
    let grad = if s == sc { s - b } else { 0.0 };
    (loss, grad)
}

/// Per-pixel segmentation term `(phi - d)^2 + nu |u - g|^2 + mu H(b, sigmoid(z))`.
pub fn pixel_is(
    phi: f64,
    u: (f64, f64),
    z: f64,
    d: f64,
    g: (f64, f64),
    b: f64,
    cfg: &LossConfig,
) -> (f64, [f64; 4]) {
    let e = phi - d;
    let (e1, e2) = (u.0 - g.0, u.1 - g.1);
    let (h, dh) = bce_with_grad(z, b);
    let loss = e * e + cfg.nu * (e1 * e1 + e2 * e2) + cfg.mu * h;
    (loss, [2.0 * e, 2.0 * cfg.nu * e1, 2.0 * cfg.nu * e2, cfg.mu * dh])
}

/// Distance/flow consistency: mean over ground-truth cell pixels of
/// `|u - grad(phi) / max(|grad(phi)|, eps)|^2`, with `grad(phi)` from
/// central differences (one-sided on the image edge).
pub fn loss_ivp<T: Real>(z: &FeatureMap<T>, t: &TargetField) -> Result<(T, FeatureMap<T>)> {
    check_shapes(z, t)?;
    let (h, w) = (z.h, z.w);
    let mut grad = FeatureMap::zeros(h, w);
    let cells: Vec<usize> = (0..h * w).filter(|&i| t.d[i] > 0.0).collect();
    if cells.is_empty() {
        return Ok((T::zero(), grad));
    }
    let inv_n = 1.0 / cells.len() as f64;
    let phi = |i: usize| z.phi[i].f64();
    // Stencil (lo, hi, scale) of a central/one-sided difference along one axis.
    let stencil = |pos: usize, len: usize, step: usize, i: usize| -> Option<(usize, usize, f64)> {
        if len < 2 {
            None
        } else if pos == 0 {
            Some((i, i + step, 1.0))
        } else if pos == len - 1 {
            Some((i - step, i, 1.0))
        } else {
            Some((i - step, i + step, 0.5))
        }
    };
    let mut total = 0.0;
    for &i in &cells {
        let (y, x) = (i / w, i % w);
        let sx = stencil(x, w, 1, i);
        let sy = stencil(y, h, w, i);
        let gx = sx.map_or(0.0, |(lo, hi, s)| s * (phi(hi) - phi(lo)));
        let gy = sy.map_or(0.0, |(lo, hi, s)| s * (phi(hi) - phi(lo)));
        let norm = gx.hypot(gy);
        let r = norm.max(IVP_EPS);
        let (n1, n2) = (gx / r, gy / r);
        let (d1, d2) = (z.u1[i].f64() - n1, z.u2[i].f64() - n2);
        total += d1 * d1 + d2 * d2;
        grad.u1[i] += T::of(2.0 * d1 * inv_n);
        grad.u2[i] += T::of(2.0 * d2 * inv_n);
        // d loss / d n, then through the normalization.
        let (dn1, dn2) = (-2.0 * d1 * inv_n, -2.0 * d2 * inv_n);
        let (dgx, dgy) = if norm > IVP_EPS {
            let dot = n1 * dn1 + n2 * dn2;
            ((dn1 - n1 * dot) / r, (dn2 - n2 * dot) / r)
        } else {
            (dn1 / r, dn2 / r)
        };
        if let Some((lo, hi, s)) = sx {
            grad.phi[hi] += T::of(s * dgx);
            grad.phi[lo] -= T::of(s * dgx);
        }
        if let Some((lo, hi, s)) = sy {
            grad.phi[hi] += T::of(s * dgy);
            grad.phi[lo] -= T::of(s * dgy);
        }
    }
    Ok((T::of(total * inv_n), grad))
}

/// Segmentation loss of one image: the summed per-pixel terms plus
/// `ivp_weight` times [`loss_ivp`], scaled per `cfg.reduction`.
pub fn loss_is<T: Real>(
    z: &FeatureMap<T>,
    t: &TargetField,
    cfg: &LossConfig,
) -> Result<(T, FeatureMap<T>)> {
    check_shapes(z, t)?;
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite feature map in segmentation loss".into()));
    }
    let n = z.len();
    let scale = cfg.reduction.factor(n);
    let mut grad = FeatureMap::zeros(z.h, z.w);
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = pixel_is(
            z.phi[i].f64(),
            (z.u1[i].f64(), z.u2[i].f64()),
            z.z[i].f64(),
            t.d[i] as f64,
            (t.gx[i] as f64, t.gy[i] as f64),
            t.b[i] as f64,
            cfg,
        );
        total += l;
        grad.phi[i] = T::of(g[0] * scale);
        grad.u1[i] = T::of(g[1] * scale);
        grad.u2[i] = T::of(g[2] * scale);
        grad.z[i] = T::of(g[3] * scale);
    }
    if cfg.ivp_weight > 0.0 {
        let (l, mut g) = loss_ivp(z, t)?;
        g.scale(T::of(cfg.ivp_weight * scale));
        grad.add_assign(&g);
        total += cfg.ivp_weight * l.f64();
    }
    Ok((T::of(total * scale), grad))
}
