use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Image, InstanceMask, Sample};
use crate::error::{Error, Result};

/// Mean over all instances of the equivalent-circle diameter `2 sqrt(A / pi)`.
pub fn mean_diameter(ds: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in &ds.items {
        for a in s.mask.areas() {
            sum += 2.0 * (a as f64 / std::f64::consts::PI).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract(format!("dataset {} has no instances", ds.name)));
    }
    Ok(sum / n as f64)
}

fn scaled_side(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).round() as usize
}

/// Source coordinate of output pixel `i` under pixel-center alignment.
fn src_coord(i: usize, ratio: f64, n_src: usize) -> f64 {
    ((i as f64 + 0.5) / ratio - 0.5).clamp(0.0, (n_src - 1) as f64)
}

pub fn resize_bilinear(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (sh, sw) = img.shape();
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = src_coord(y, ry, sh);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = src_coord(x, rx, sw);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let at = |yy, xx| img.at(yy, xx) as f64;
            let v = (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty)
                + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty;
            out.push(v as f32);
        }
    }
    Image::from_clamped(h, w, out)
}

pub fn resize_nearest(mask: &InstanceMask, h: usize, w: usize) -> Result<InstanceMask> {
    let (sh, sw) = mask.shape();
    let pick = |i: usize, n: usize, sn: usize| (((i as f64 + 0.5) * sn as f64 / n as f64) as usize).min(sn - 1);
    let mut raw = Vec::with_capacity(h * w);
    for y in 0..h {
        let yy = pick(y, h, sh);
        for x in 0..w {
            raw.push(mask.at(yy, pick(x, w, sw)));
        }
    }
    InstanceMask::from_raw(h, w, raw)
}

/// Resizes every item by `ratio` (bilinear images, nearest-neighbour masks).
pub fn rescale_dataset(ds: &Dataset, ratio: f64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("rescale ratio must be positive, got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(ds.clone());
    }
    let items = ds
        .items
        .iter()
        .map(|s| {
            let (h, w) = s.image.shape();
            let (nh, nw) = (scaled_side(h, ratio), scaled_side(w, ratio));
            if nh < 8 || nw < 8 {
                return Err(Error::Config(format!(
                    "rescaling {h}x{w} by {ratio} gives {nh}x{nw}, below 8 px"
                )));
            }
            Sample::new(resize_bilinear(&s.image, nh, nw)?, resize_nearest(&s.mask, nh, nw)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.name.clone(), ds.split, items)
}

/// K annotated target patches, each centred on one sampled cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotSet {
    pub k: usize,
    pub patches: Vec<Sample>,
    pub source_diameter: f64,
    pub target_diameter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotOrigin {
    pub image: usize,
    pub label: u32,
    pub y0: usize,
    pub x0: usize,
}

/// Minimum shot side in pixels.
pub const MIN_SHOT: usize = 16;

/// Samples `k` distinct instances and crops a square of side
/// `ceil(2 * mean diameter)` (at least [`MIN_SHOT`], at most the image)
/// around each centroid, shifted to stay inside the image.
pub fn extract_shots(target_train: &Dataset, k: usize, seed: u64, source_diameter: f64) -> Result<ShotSet> {
    extract_shots_with_origins(target_train, k, seed, source_diameter).map(|(s, _)| s)
}

pub fn extract_shots_with_origins(
    target_train: &Dataset,
    k: usize,
    seed: u64,
    source_diameter: f64,
) -> Result<(ShotSet, Vec<ShotOrigin>)> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let all: Vec<(usize, u32)> = target_train
        .items
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (1..=s.mask.n_instances()).map(move |l| (i, l)))
        .collect();
    if all.len() < k {
        return Err(Error::Data(format!(
            "{}-shot extraction needs {k} instances, dataset has {}",
            k,
            all.len()
        )));
    }
    let diam = mean_diameter(target_train)?;
    let side = ((2.0 * diam).ceil() as usize).max(MIN_SHOT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(k);
    let mut origins = Vec::with_capacity(k);
    for j in sample(&mut rng, all.len(), k) {
        let (i, label) = all[j];
        let s = &target_train.items[i];
        let (h, w) = s.image.shape();
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for (p, &l) in s.mask.labels().iter().enumerate() {
            if l == label {
                sy += (p / w) as f64;
                sx += (p % w) as f64;
                n += 1.0;
            }
        }
        let (cy, cx) = ((sy / n).round() as usize, (sx / n).round() as usize);
        let (sh, sw) = (side.min(h), side.min(w));
        let y0 = cy.saturating_sub(sh / 2).min(h - sh);
        let x0 = cx.saturating_sub(sw / 2).min(w - sw);
        patches.push(Sample::new(s.image.crop(y0, x0, sh, sw)?, s.mask.crop(y0, x0, sh, sw)?)?);
        origins.push(ShotOrigin { image: i, label, y0, x0 });
    }
    Ok((
        ShotSet {
            k,
            patches,
            source_diameter,
            target_diameter: diam,
        },
        origins,
    ))
}
