//! Core raster types, datasets and their on-disk formats.

mod madc;
mod pgm;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use madc::{
    decode_tensors, encode_tensors, read_checkpoint, read_tensors, write_checkpoint, write_tensors,
    Checkpoint, Tensor, MADC_MAGIC, MADC_VERSION,
};
pub use store::{
    image_file_name, mask_file_name, read_dataset_dir, read_manifest, write_dataset_dir, FilePair,
    Manifest, MANIFEST,
};
pub use pgm::{
    decode_pgm, encode_image, encode_mask, quantize, read_image, read_mask, read_pgm, write_image,
    write_mask, Pgm,
};

/// Row-major 2-D raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Contract(format!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        y * self.w + x
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        let w = self.w;
        self.data[y * w + x] = v;
    }
}

/// Grayscale intensity raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    grid: Grid<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Contract(format!("image must be nonempty, got {h}x{w}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Contract(format!(
                "image value {} at index {pos} outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Image {
            grid: Grid::from_vec(h, w, data)?,
        })
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Image::new(h, w, data)
    }

    pub fn h(&self) -> usize {
        self.grid.h
    }

    pub fn w(&self) -> usize {
        self.grid.w
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.grid.at(y, x)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }
}

/// Relabels raw instance ids to `0..=N` in order of first appearance in a
/// row-major scan. Zero stays background.
pub fn relabel(raw: &[u32]) -> (Vec<u32>, u32) {
    let mut map = std::collections::HashMap::new();
    let mut next = 0u32;
    let labels = raw
        .iter()
        .map(|&v| {
            if v == 0 {
                0
            } else {
                *map.entry(v).or_insert_with(|| {
                    next += 1;
                    next
                })
            }
        })
        .collect();
    (labels, next)
}

/// Instance labels: 0 is background, `1..=N` are cells, each present.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    h: usize,
    w: usize,
    labels: Vec<u32>,
    n: u32,
}

impl InstanceMask {
    /// Accepts any raw labelling and repairs it to the contiguous form.
    pub fn from_raw(h: usize, w: usize, raw: Vec<u32>) -> Result<Self> {
        if raw.len() != h * w {
            return Err(Error::Contract(format!(
                "mask {h}x{w} needs {} labels, got {}",
                h * w,
                raw.len()
            )));
        }
        let (labels, n) = relabel(&raw);
        Ok(InstanceMask { h, w, labels, n })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        InstanceMask {
            h,
            w,
            labels: vec![0; h * w],
            n: 0,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// Number of instances `N`.
    pub fn n_instances(&self) -> u32 {
        self.n
    }

    /// Pixel count of each instance, indexed by `label - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.n as usize];
        for &l in &self.labels {
            if l > 0 {
                areas[l as usize - 1] += 1;
            }
        }
        areas
    }

    /// Checks the contiguity invariant; always true for masks built through
    /// the public constructors.
    pub fn is_contiguous(&self) -> bool {
        let areas = self.areas();
        self.labels.iter().all(|&l| l <= self.n) && areas.iter().all(|&a| a > 0)
    }

    /// Extracts the window `[y0, y0 + h) x [x0, x0 + w)`, relabelled.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(Error::Contract(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds mask {}x{}",
                self.h, self.w
            )));
        }
        let mut raw = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            raw.extend_from_slice(&self.labels[y * self.w + x0..y * self.w + x0 + w]);
        }
        InstanceMask::from_raw(h, w, raw)
    }
}

impl Image {
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.h() || x0 + w > self.w() {
            return Err(Error::Contract(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds image {}x{}",
                self.h(),
                self.w()
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data()[y * self.w() + x0..y * self.w() + x0 + w]);
        }
        Image::new(h, w, data)
    }
}

/// Per-pixel supervision derived from an instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetField {
    pub h: usize,
    pub w: usize,
    /// Distance to the nearest pixel outside the instance; 0 on background.
    pub d: Vec<f32>,
    pub gx: Vec<f32>,
    pub gy: Vec<f32>,
    /// 1 on instance border pixels.
    pub b: Vec<u8>,
}

impl TargetField {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Verifies the structural invariants against the mask the field came from.
    pub fn check(&self, mask: &InstanceMask) -> Result<()> {
        if mask.shape() != (self.h, self.w) {
            return Err(Error::Contract("target/mask shape mismatch".into()));
        }
        for (i, &l) in mask.labels().iter().enumerate() {
            let d = self.d[i];
            if !(d.is_finite() && d >= 0.0) || ((d == 0.0) != (l == 0)) {
                return Err(Error::Contract(format!("distance {d} at {i} with label {l}")));
            }
            let n = (self.gx[i] as f64).hypot(self.gy[i] as f64);
            if n != 0.0 && (n - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("flow norm {n} at {i}")));
            }
            if l == 0 && (n != 0.0 || self.b[i] != 0) {
                return Err(Error::Contract(format!("background pixel {i} carries flow/border")));
            }
            if self.b[i] > 1 {
                return Err(Error::Contract(format!("non-binary border value at {i}")));
            }
        }
        Ok(())
    }
}

/// Dense network output: distance, flow and border logit per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub h: usize,
    pub w: usize,
    pub phi: Vec<T>,
    pub u1: Vec<T>,
    pub u2: Vec<T>,
    pub z: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        let n = h * w;
        FeatureMap {
            h,
            w,
            phi: vec![T::zero(); n],
            u1: vec![T::zero(); n],
            u2: vec![T::zero(); n],
            z: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel-major `[phi, u1, u2, z]` buffer.
    pub fn from_channels(h: usize, w: usize, data: &[T]) -> Self {
        let n = h * w;
        assert_eq!(data.len(), 4 * n, "feature buffer must hold 4 channels");
        FeatureMap {
            h,
            w,
            phi: data[..n].to_vec(),
            u1: data[n..2 * n].to_vec(),
            u2: data[2 * n..3 * n].to_vec(),
            z: data[3 * n..].to_vec(),
        }
    }

    pub fn to_channels(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(4 * self.len());
        out.extend_from_slice(&self.phi);
        out.extend_from_slice(&self.u1);
        out.extend_from_slice(&self.u2);
        out.extend_from_slice(&self.z);
        out
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        for (a, b) in [
            (&mut self.phi, &other.phi),
            (&mut self.u1, &other.u1),
            (&mut self.u2, &other.u2),
            (&mut self.z, &other.z),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for ch in [&mut self.phi, &mut self.u1, &mut self.u2, &mut self.z] {
            for x in ch.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.phi, &self.u1, &self.u2, &self.z]
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Assembles the feature map a perfect network would emit for `t`, with
    /// border logits of `+/- logit`.
    pub fn from_targets(t: &TargetField, logit: f64) -> Self {
        let c = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<_>>();
        FeatureMap {
            h: t.h,
            w: t.w,
            phi: c(&t.d),
            u1: c(&t.gx),
            u2: c(&t.gy),
            z: t
                .b
                .iter()
                .map(|&b| T::of(if b == 1 { logit } else { -logit }))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect::<Vec<_>>();
        FeatureMap {
            h: self.h,
            w: self.w,
            phi: c(&self.phi),
            u1: c(&self.u1),
            u2: c(&self.u2),
            z: c(&self.z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: InstanceMask,
}

impl Sample {
    pub fn new(image: Image, mask: InstanceMask) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::Contract(format!(
                "image {:?} and mask {:?} differ in shape",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Sample { image, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub items: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, items: Vec<Sample>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("dataset must be nonempty".into()));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_instances(&self) -> usize {
        self.items.iter().map(|s| s.mask.n_instances() as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relabel_uses_first_appearance_order() {
        let (l, n) = relabel(&[0, 7, 3, 7, 0, 9]);
        assert_eq!(l, vec![0, 1, 2, 1, 0, 3]);
        assert_eq!(n, 3);
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Image::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn sample_rejects_shape_mismatch() {
        let img = Image::new(2, 2, vec![0.0; 4]).unwrap();
        let m = InstanceMask::empty(2, 3);
        assert!(Sample::new(img, m).is_err());
    }

    #[test]
    fn mask_crop_relabels() {
        let m = InstanceMask::from_raw(2, 3, vec![1, 2, 3, 1, 2, 3]).unwrap();
        let c = m.crop(0, 1, 2, 2).unwrap();
        assert_eq!(c.labels(), &[1, 2, 1, 2]);
        assert_eq!(c.n_instances(), 2);
    }

    proptest! {
        #[test]
        fn relabel_is_idempotent(raw in prop::collection::vec(0u32..20, 1..64)) {
            let (once, n1) = relabel(&raw);
            let (twice, n2) = relabel(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(n1, n2);
            let m = InstanceMask::from_raw(1, raw.len(), raw).unwrap();
            prop_assert!(m.is_contiguous());
        }
    }
}
