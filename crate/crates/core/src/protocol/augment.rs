use rand::Rng;

use crate::datamodel::{Image, InstanceMask, TargetField};
use crate::error::Result;

/// An element of the square's symmetry group: optional transpose, then
/// optional horizontal and vertical flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Dihedral {
    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|k| Dihedral {
            transpose: k & 1 != 0,
            flip_x: k & 2 != 0,
            flip_y: k & 4 != 0,
        })
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Dihedral {
            transpose: rng.gen(),
            flip_x: rng.gen(),
            flip_y: rng.gen(),
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transpose {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_grid<T: Copy>(&self, v: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_shape(h, w);
        let mut out = Vec::with_capacity(v.len());
        for y in 0..oh {
            for x in 0..ow {
                let yy = if self.flip_y { oh - 1 - y } else { y };
                let xx = if self.flip_x { ow - 1 - x } else { x };
                let (sy, sx) = if self.transpose { (xx, yy) } else { (yy, xx) };
                out.push(v[sy * w + sx]);
            }
        }
        out
    }

    /// Maps a flow vector `(x, y)` the same way the grid is mapped.
    pub fn apply_vector(&self, gx: f32, gy: f32) -> (f32, f32) {
        let (mut a, mut b) = if self.transpose { (gy, gx) } else { (gx, gy) };
        if self.flip_x {
            a = -a;
        }
        if self.flip_y {
            b = -b;
        }
        (a, b)
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.shape();
        let (oh, ow) = self.out_shape(h, w);
        Image::new(oh, ow, self.apply_grid(img.data(), h, w))
    }

    pub fn apply_mask(&self, m: &InstanceMask) -> Result<InstanceMask> {
        let (h, w) = m.shape();
        let (oh, ow) = self.out_shape(h, w);
        InstanceMask::from_raw(oh, ow, self.apply_grid(m.labels(), h, w))
    }

    pub fn apply_targets(&self, t: &TargetField) -> TargetField {
        let (oh, ow) = self.out_shape(t.h, t.w);
        let gx = self.apply_grid(&t.gx, t.h, t.w);
        let gy = self.apply_grid(&t.gy, t.h, t.w);
        let (gx, gy) = gx.iter().zip(&gy).map(|(&a, &b)| self.apply_vector(a, b)).unzip();
        TargetField {
            h: oh,
            w: ow,
            d: self.apply_grid(&t.d, t.h, t.w),
            gx,
            gy,
            b: self.apply_grid(&t.b, t.h, t.w),
        }
    }
}

/// `clamp(v * scale + offset, 0, 1)` per pixel.
pub fn adjust_intensity(img: &Image, scale: f32, offset: f32) -> Result<Image> {
    let (h, w) = img.shape();
    Image::from_clamped(h, w, img.data().iter().map(|&v| v * scale + offset).collect())
}

/// A random symmetry plus an intensity scale in [0.8, 1.2] and offset in
/// [-0.1, 0.1], applied consistently to an image and its targets.
pub fn augment<R: Rng>(img: &Image, t: &TargetField, rng: &mut R) -> Result<(Image, TargetField)> {
    let g = Dihedral::random(rng);
    let scale = rng.gen_range(0.8..=1.2);
    let offset = rng.gen_range(-0.1..=0.1);
    Ok((adjust_intensity(&g.apply_image(img)?, scale, offset)?, g.apply_targets(t)))
}
