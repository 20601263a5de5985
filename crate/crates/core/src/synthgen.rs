//! Deterministic synthetic microscopy: elongated, curved and branched cells
//! rendered under opposed intensity palettes to create a domain shift.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Image, InstanceMask, Sample, Split};
use crate::error::{Error, Result};

const MAX_PLACEMENT_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Bright background, dark cells with a bright halo.
    Phase,
    /// Dark background, bright cells: roughly the negative of `Phase`.
    Fluor,
    /// Phase palette; presets pair it with long, gently curved tubes.
    Worm,
}

/// Intensity palette of a rendering domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: f32,
    pub interior: f32,
    pub halo: Option<f32>,
}

impl Domain {
    pub fn palette(self) -> Palette {
        match self {
            Domain::Phase | Domain::Worm => Palette {
                background: 0.8,
                interior: 0.25,
                halo: Some(0.95),
            },
            Domain::Fluor => Palette {
                background: 0.1,
                interior: 0.85,
                halo: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_split")]
    pub split: Split,
    pub seed: u64,
    pub n_images: usize,
    pub h: usize,
    pub w: usize,
    pub cells_per_image: [usize; 2],
    pub radius: [f64; 2],
    pub skeleton_length: [usize; 2],
    /// Maximum heading change per unit step, in radians.
    pub curvature: f64,
    pub branch_prob: f64,
    pub domain: Domain,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_split() -> Split {
    Split::Train
}

impl SynthConfig {
    /// Rod-shaped, occasionally curved or branched bacteria under phase contrast.
    pub fn phase(seed: u64, n_images: usize) -> Self {
        SynthConfig {
            name: "phase".into(),
            split: Split::Train,
            seed,
            n_images,
            h: 64,
            w: 64,
            cells_per_image: [3, 6],
            radius: [2.0, 3.0],
            skeleton_length: [8, 22],
            curvature: 0.12,
            branch_prob: 0.2,
            domain: Domain::Phase,
            noise_sigma: 0.03,
            blur_sigma: 0.6,
        }
    }

    /// Same morphology family as [`SynthConfig::phase`], slightly thicker
    /// cells, rendered as fluorescence.
    pub fn fluor(seed: u64, n_images: usize) -> Self {
        SynthConfig {
            name: "fluor".into(),
            radius: [2.5, 3.5],
            domain: Domain::Fluor,
            ..SynthConfig::phase(seed, n_images)
        }
    }

    pub fn worm(seed: u64, n_images: usize) -> Self {
        SynthConfig {
            name: "worm".into(),
            cells_per_image: [1, 3],
            radius: [2.0, 3.0],
            skeleton_length: [30, 50],
            curvature: 0.06,
            branch_prob: 0.0,
            domain: Domain::Worm,
            ..SynthConfig::phase(seed, n_images)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if self.h < 8 || self.w < 8 {
            return bad(format!("image size {}x{} below 8 px", self.h, self.w));
        }
        if self.cells_per_image[0] > self.cells_per_image[1] {
            return bad(format!("cells_per_image {:?} is not a range", self.cells_per_image));
        }
        if !(self.radius[0] >= 1.0 && self.radius[0] <= self.radius[1]) {
            return bad(format!("radius {:?} must satisfy 1 <= min <= max", self.radius));
        }
        if self.radius[1] >= self.h.min(self.w) as f64 / 2.0 {
            return bad(format!(
                "radius {} cannot fit in a {}x{} image",
                self.radius[1], self.h, self.w
            ));
        }
        if self.skeleton_length[0] > self.skeleton_length[1] {
            return bad(format!("skeleton_length {:?} is not a range", self.skeleton_length));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad(format!("branch_prob {} outside [0, 1]", self.branch_prob));
        }
        for (name, v) in [
            ("curvature", self.curvature),
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Polyline skeleton of one cell, possibly with one branch.
#[derive(Clone, Debug)]
struct Skeleton {
    paths: Vec<Vec<(f64, f64)>>,
    radius: f64,
}

fn walk(
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    mut heading: f64,
    steps: usize,
    curvature: f64,
) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(steps + 1);
    let mut p = start;
    pts.push(p);
    for _ in 0..steps {
        if curvature > 0.0 {
            heading += rng.gen_range(-curvature..=curvature);
        }
        p = (p.0 + heading.cos(), p.1 + heading.sin());
        pts.push(p);
    }
    pts
}

fn sample_skeleton(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Skeleton {
    let radius = if cfg.radius[0] < cfg.radius[1] {
        rng.gen_range(cfg.radius[0]..=cfg.radius[1])
    } else {
        cfg.radius[0]
    };
    let len = rng.gen_range(cfg.skeleton_length[0]..=cfg.skeleton_length[1]);
    let start = (
        rng.gen_range(0.0..cfg.w as f64 - 1.0),
        rng.gen_range(0.0..cfg.h as f64 - 1.0),
    );
    let heading = rng.gen_range(0.0..2.0 * PI);
    let main = walk(rng, start, heading, len, cfg.curvature);
    let mut paths = vec![main];
    if cfg.branch_prob > 0.0 && len >= 4 && rng.gen_bool(cfg.branch_prob) {
        let at = rng.gen_range(len / 4..=3 * len / 4);
        let base = paths[0][at];
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let turn = rng.gen_range(PI / 4.0..=PI / 2.0);
        let branch = walk(rng, base, heading + side * turn, (len / 2).max(2), cfg.curvature);
        paths.push(branch);
    }
    Skeleton { paths, radius }
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Pixels whose centres lie within `radius` of the skeleton, or `None` when
/// the tube leaves the image.
fn rasterize(sk: &Skeleton, h: usize, w: usize) -> Option<Vec<usize>> {
    let r = sk.radius;
    let pts = sk.paths.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 - r < 0.0 || y0 - r < 0.0 || x1 + r > (w - 1) as f64 || y1 + r > (h - 1) as f64 {
        return None;
    }
    let r2 = r * r;
    let mut pixels = Vec::new();
    for y in (y0 - r).floor() as usize..=(y1 + r).ceil() as usize {
        for x in (x0 - r).floor() as usize..=(x1 + r).ceil() as usize {
            let p = (x as f64, y as f64);
            let inside = sk.paths.iter().any(|path| {
                path.windows(2).any(|s| seg_dist2(p, s[0], s[1]) <= r2)
                    || (path.len() == 1 && seg_dist2(p, path[0], path[0]) <= r2)
            });
            if inside {
                pixels.push(y * w + x);
            }
        }
    }
    (!pixels.is_empty()).then_some(pixels)
}

/// True when any pixel of the candidate touches (8-connected) an existing cell.
fn collides(labels: &[u32], h: usize, w: usize, pixels: &[usize]) -> bool {
    pixels.iter().any(|&i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && labels[yy as usize * w + xx as usize] != 0
            })
        })
    })
}

fn place_cells(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> InstanceMask {
    let (h, w) = (cfg.h, cfg.w);
    let mut labels = vec![0u32; h * w];
    let n_cells = rng.gen_range(cfg.cells_per_image[0]..=cfg.cells_per_image[1]);
    let mut next = 1u32;
    for _ in 0..n_cells {
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let sk = sample_skeleton(rng, cfg);
            let Some(pixels) = rasterize(&sk, h, w) else {
                continue;
            };
            if collides(&labels, h, w, &pixels) {
                continue;
            }
            for &i in &pixels {
                labels[i] = next;
            }
            next += 1;
            break;
        }
    }
    InstanceMask::from_raw(h, w, labels).expect("labels sized to the image")
}

/// Separable Gaussian blur with kernel half-width `ceil(3 sigma)`; edges are
/// replicated.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * data[y * w + clampi(x as isize + k as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * tmp[clampi(y as isize + k as isize - half, h) * w + x])
                .sum();
        }
    }
    out
}

/// Noise-free, unblurred rendering of `mask` under `domain`.
pub fn render_clean(mask: &InstanceMask, domain: Domain) -> Vec<f64> {
    let (h, w) = mask.shape();
    let pal = domain.palette();
    let mut out = vec![pal.background as f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask.at(y, x) != 0 {
                out[i] = pal.interior as f64;
            } else if let Some(halo) = pal.halo {
                let near_cell = (y > 0 && mask.at(y - 1, x) != 0)
                    || (y + 1 < h && mask.at(y + 1, x) != 0)
                    || (x > 0 && mask.at(y, x - 1) != 0)
                    || (x + 1 < w && mask.at(y, x + 1) != 0);
                if near_cell {
                    out[i] = halo as f64;
                }
            }
        }
    }
    out
}

/// Renders `mask` with blur and additive Gaussian noise drawn from `rng`.
pub fn render(
    mask: &InstanceMask,
    domain: Domain,
    blur_sigma: f64,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    let (h, w) = mask.shape();
    let clean = gaussian_blur(&render_clean(mask, domain), h, w, blur_sigma);
    let data = if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("validated sigma");
        clean
            .iter()
            .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        clean.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
    };
    Image::new(h, w, data).expect("clamped to [0, 1]")
}

pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

pub fn gen_sample(cfg: &SynthConfig, index: usize) -> Sample {
    let mut rng = image_rng(cfg.seed, index);
    let mask = place_cells(&mut rng, cfg);
    let image = render(&mask, cfg.domain, cfg.blur_sigma, cfg.noise_sigma, &mut rng);
    Sample { image, mask }
}

pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let items = (0..cfg.n_images).map(|i| gen_sample(cfg, i)).collect();
    Dataset::new(cfg.name.clone(), cfg.split, items)
}

/// One uniformly placed `size x size` crop per item, masks relabelled.
pub fn crop_patches(ds: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(ds.len());
    for s in &ds.items {
        let (h, w) = s.image.shape();
        if size > h.min(w) {
            return Err(Error::Config(format!("patch {size} exceeds image {h}x{w}")));
        }
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        items.push(Sample {
            image: s.image.crop(y0, x0, size, size)?,
            mask: s.mask.crop(y0, x0, size, size)?,
        });
    }
    Dataset::new(ds.name.clone(), ds.split, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelgen::distance_field;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::phase(7, 3);
        assert_eq!(gen_dataset(&cfg).unwrap(), gen_dataset(&cfg).unwrap());
    }

    #[test]
    fn straight_capsules_have_expected_max_distance() {
        let cfg = SynthConfig {
            branch_prob: 0.0,
            curvature: 0.0,
            radius: [2.5, 2.5],
            noise_sigma: 0.0,
            ..SynthConfig::phase(3, 6)
        };
        let ds = gen_dataset(&cfg).unwrap();
        let mut checked = 0;
        for s in &ds.items {
            let d = distance_field(&s.mask);
            let mut max_d = vec![0f32; s.mask.n_instances() as usize];
            for (i, &l) in s.mask.labels().iter().enumerate() {
                if l > 0 {
                    max_d[l as usize - 1] = max_d[l as usize - 1].max(d[i]);
                }
            }
            for m in max_d {
                assert!((2.0..=3.5).contains(&m), "max distance {m} for radius 2.5");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn phase_and_fluor_backgrounds_differ() {
        let cfg = SynthConfig::phase(11, 2);
        let ds = gen_dataset(&cfg).unwrap();
        for s in &ds.items {
            let mut rng = image_rng(0, 0);
            let a = render(&s.mask, Domain::Phase, 0.6, 0.03, &mut rng);
            let b = render(&s.mask, Domain::Fluor, 0.6, 0.03, &mut rng);
            let bg_mean = |img: &Image| {
                let v: Vec<f32> = img
                    .data()
                    .iter()
                    .zip(s.mask.labels())
                    .filter(|(_, &l)| l == 0)
                    .map(|(&v, _)| v)
                    .collect();
                v.iter().sum::<f32>() / v.len() as f32
            };
            assert!((bg_mean(&a) - bg_mean(&b)).abs() > 0.5);
        }
    }

    #[test]
    fn oversize_radius_is_config_error() {
        let cfg = SynthConfig {
            radius: [2.0, 40.0],
            ..SynthConfig::phase(0, 1)
        };
        assert!(matches!(gen_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn crops_have_requested_size_and_valid_masks() {
        let cfg = SynthConfig {
            h: 224,
            w: 224,
            cells_per_image: [10, 20],
            ..SynthConfig::phase(5, 2)
        };
        let ds = gen_dataset(&cfg).unwrap();
        let crops = crop_patches(&ds, 112, 9).unwrap();
        for s in &crops.items {
            assert_eq!(s.image.shape(), (112, 112));
            assert!(s.mask.is_contiguous());
        }
        assert_eq!(crop_patches(&ds, 224, 1).unwrap(), ds);
        assert!(crop_patches(&ds, 225, 1).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let data = vec![0.3; 30];
        for v in gaussian_blur(&data, 5, 6, 1.2) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
