//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use cellshot::datamodel::{FeatureMap, Image, InstanceMask, TargetField};
use cellshot::evaluator::IouMatrix;
use cellshot::labelgen::make_targets;
use cellshot::losses::{
    interior_pixels, loss_adapt_planned, loss_cb, loss_cd, loss_is, loss_ivp, sample_cb_pairs, sample_cd_plan,
    AdaptConfig, AdaptPlan, LossConfig, Reduction,
};
use cellshot::net::{backward, forward, predict, Grads, ModelConfig, Params};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random instance mask built from overlapping rectangles and blobs.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, max_shapes: usize) -> InstanceMask {
    let mut raw = vec![0u32; h * w];
    let n = rng.gen_range(0..=max_shapes);
    for k in 0..n {
        let label = k as u32 + 1;
        if rng.gen_bool(0.5) {
            let (rh, rw) = (rng.gen_range(1..=h / 2), rng.gen_range(1..=w / 2));
            let (y0, x0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    raw[y * w + x] = label;
                }
            }
        } else {
            let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let (ry, rx) = (rng.gen_range(1.0..h as f64 / 3.0), rng.gen_range(1.0..w as f64 / 3.0));
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    if dy * dy + dx * dx <= 1.0 {
                        raw[y * w + x] = label;
                    }
                }
            }
        }
    }
    // Occasional salt of single-pixel instances.
    for _ in 0..rng.gen_range(0..4) {
        let i = rng.gen_range(0..h * w);
        raw[i] = 1000 + i as u32;
    }
    InstanceMask::from_raw(h, w, raw).unwrap()
}

/// Random mask of disjoint axis-aligned rectangles.
pub fn random_rectangles(rng: &mut ChaCha8Rng, h: usize, w: usize, max_shapes: usize) -> InstanceMask {
    let mut raw = vec![0u32; h * w];
    for k in 0..rng.gen_range(0..=max_shapes) {
        let (rh, rw) = (rng.gen_range(1..=h / 2), rng.gen_range(1..=w / 2));
        let (y0, x0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
        let free = (y0..y0 + rh).all(|y| (x0..x0 + rw).all(|x| raw[y * w + x] == 0));
        if free {
            for y in y0..y0 + rh {
                raw[y * w + x0..y * w + x0 + rw].fill(k as u32 + 1);
            }
        }
    }
    InstanceMask::from_raw(h, w, raw).unwrap()
}

/// `(climbing, moving)`: flow-bearing cell pixels, and those whose unit Euler
/// step does not lower the bilinearly sampled distance.
pub fn ascent_counts(mask: &InstanceMask) -> (usize, usize) {
    let (h, w) = mask.shape();
    let t = make_targets(mask);
    let (mut climbing, mut moving) = (0, 0);
    for i in 0..h * w {
        let (ux, uy) = (t.gx[i] as f64, t.gy[i] as f64);
        if ux == 0.0 && uy == 0.0 {
            continue;
        }
        moving += 1;
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        climbing += (bilinear(&t.d, h, w, y + uy, x + ux) >= t.d[i] as f64) as usize;
    }
    (climbing, moving)
}

/// Nearest pixel of another label by exhaustive search, counting the frame
/// around the image as background.
pub fn brute_distance(mask: &InstanceMask) -> Vec<f32> {
    let (h, w) = mask.shape();
    let (hi, wi) = (h as i64, w as i64);
    let mut out = vec![0f32; h * w];
    for y in 0..hi {
        for x in 0..wi {
            let l = mask.at(y as usize, x as usize);
            if l == 0 {
                continue;
            }
            let mut best = i64::MAX;
            for qy in -1..=hi {
                for qx in -1..=wi {
                    let inside = qy >= 0 && qx >= 0 && qy < hi && qx < wi;
                    if inside && mask.at(qy as usize, qx as usize) == l {
                        continue;
                    }
                    best = best.min((qy - y).pow(2) + (qx - x).pow(2));
                }
            }
            out[(y * wi + x) as usize] = (best as f64).sqrt() as f32;
        }
    }
    out
}

/// Bilinear sample of a row-major grid with zero padding outside.
pub fn bilinear(g: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            g[yy as usize * w + xx as usize] as f64
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Maximum number of one-to-one matches with IoU at or above `thr`.
pub fn optimal_tp(m: &IouMatrix, thr: f64) -> usize {
    fn go(m: &IouMatrix, thr: f64, g: usize, used: &mut Vec<bool>) -> usize {
        if g == m.n_gt {
            return 0;
        }
        let mut best = go(m, thr, g + 1, used);
        for p in 0..m.n_pred {
            if !used[p] && m.at(g, p) >= thr && m.at(g, p) > 0.0 {
                used[p] = true;
                best = best.max(1 + go(m, thr, g + 1, used));
                used[p] = false;
            }
        }
        best
    }
    go(m, thr, 0, &mut vec![false; m.n_pred])
}

pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        levels: 1,
        base_channels: 2,
    }
}

/// Random image with rectangular cells and its targets.
pub fn tiny_sample(rng: &mut ChaCha8Rng, n: usize) -> (Image, TargetField) {
    let mut raw = vec![0u32; n * n];
    let mut img: Vec<f32> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    for label in 1..=2u32 {
        let (rh, rw) = (rng.gen_range(4..=n / 2), rng.gen_range(4..=n / 2));
        let (y0, x0) = (rng.gen_range(0..=n - rh), rng.gen_range(0..=n - rw));
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                raw[y * n + x] = label;
                img[y * n + x] *= 0.5;
            }
        }
    }
    let mask = InstanceMask::from_raw(n, n, raw).unwrap();
    (Image::new(n, n, img).unwrap(), make_targets(&mask))
}

pub fn tiny_params(rng: &mut ChaCha8Rng) -> Params<f64> {
    let mut p = Params::<f32>::init(&tiny_model(), rng.gen()).unwrap().cast::<f64>();
    // Spread the biases so activations are not all near zero.
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

/// Worst relative error between analytic and central-difference gradients
/// over `n_coords` random parameter coordinates.
pub fn grad_check(
    params: &Params<f64>,
    loss: impl Fn(&Params<f64>) -> f64,
    grads: &Grads<f64>,
    n_coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let ti = rng.gen_range(0..params.tensors.len());
        let ci = rng.gen_range(0..params.tensors[ti].data.len());
        let mut p = params.clone();
        let x = p.tensors[ti].data[ci];
        p.tensors[ti].data[ci] = x + FD_STEP;
        let up = loss(&p);
        p.tensors[ti].data[ci] = x - FD_STEP;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[ti][ci];
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-7 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradLoss {
    Is,
    Ivp,
    Cd,
    Cb,
    Adapt,
}

/// Worst relative gradient error of one randomized trial.
pub fn grad_trial(which: GradLoss, rng: &mut ChaCha8Rng) -> f64 {
    let params = tiny_params(rng);
    let (ti, tt) = tiny_sample(rng, 12);
    let (si, st) = tiny_sample(rng, 12);
    let lc = LossConfig {
        reduction: if rng.gen_bool(0.5) { Reduction::Sum } else { Reduction::Mean },
        ..LossConfig::default()
    };
    let acfg = AdaptConfig {
        pixels_per_pair: 16,
        pairs_per_class: 16,
        n_negatives: 5,
        ..AdaptConfig::default()
    };
    let zs0 = predict(&params, &si).unwrap();
    let plan = AdaptPlan {
        cd: sample_cd_plan(&tt, &zs0, &interior_pixels(&st), 16, acfg.sigma_rbf, acfg.delta, 5, rng).unwrap(),
        cb: sample_cb_pairs(&tt.b, &st.b, 16, rng),
    };
    let pair_loss = |p: &Params<f64>, g: Option<&mut Grads<f64>>| -> f64 {
        let (zt, tape_t) = forward(p, &ti).unwrap();
        let (zs, tape_s) = forward(p, &si).unwrap();
        let (v, gt, gs) = match which {
            GradLoss::Cd => loss_cd(&zt, &zs, &plan.cd, acfg.tau, acfg.sigma_rbf),
            GradLoss::Cb => loss_cb(&zt, &zs, &plan.cb, acfg.margin, acfg.lambda),
            _ => unreachable!(),
        };
        if let Some(g) = g {
            backward(p, &tape_t, &gt, g).unwrap();
            backward(p, &tape_s, &gs, g).unwrap();
        }
        v
    };
    let single_loss = |p: &Params<f64>, g: Option<&mut Grads<f64>>| -> f64 {
        let (z, tape) = forward(p, &ti).unwrap();
        let (v, dz): (f64, FeatureMap<f64>) = match which {
            GradLoss::Is => loss_is(&z, &tt, &lc).unwrap(),
            GradLoss::Ivp => loss_ivp(&z, &tt).unwrap(),
            _ => unreachable!(),
        };
        if let Some(g) = g {
            backward(p, &tape, &dz, g).unwrap();
        }
        v
    };
    let adapt_loss = |p: &Params<f64>, g: Option<&mut Grads<f64>>| -> f64 {
        let mut scratch = p.zero_grads();
        let g = g.unwrap_or(&mut scratch);
        loss_adapt_planned(p, (&ti, &tt), (&si, &st), &plan, &lc, &acfg, g).unwrap().total
    };
    let f = |p: &Params<f64>, g: Option<&mut Grads<f64>>| match which {
        GradLoss::Is | GradLoss::Ivp => single_loss(p, g),
        GradLoss::Cd | GradLoss::Cb => pair_loss(p, g),
        GradLoss::Adapt => adapt_loss(p, g),
    };
    let mut g = params.zero_grads();
    f(&params, Some(&mut g));
    grad_check(&params, |p| f(p, None), &g, 6, rng)
}
