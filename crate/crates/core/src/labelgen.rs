//! Ground-truth supervision from instance masks: distance field, unit flow
//! toward the skeleton, and the 4-connected border mask.
//!
//! The mask is treated as if surrounded by a one-pixel background frame, so
//! pixels on the image edge count as bordering a foreign pixel.

use crate::datamodel::{InstanceMask, TargetField};
use crate::error::{Error, Result};

/// Flow vectors shorter than this are treated as plateau and zeroed.
pub const FLOW_EPS: f64 = 1e-6;

/// Squared 1-D distance transform (Felzenszwalb & Huttenlocher) of `f`,
/// written into `out`. `v` and `z` are scratch buffers of length `n` and
/// `n + 1`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    // The first finite sample seeds the lower envelope.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never underflows k.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact Euclidean distance from each cell pixel to the nearest pixel with a
/// different label (background, another cell, or the frame outside the
/// image). Zero on background.
pub fn distance_field(mask: &InstanceMask) -> Vec<f32> {
    let (h, w) = mask.shape();
    let n = mask.n_instances() as usize;
    let mut out = vec![0f32; h * w];
    if n == 0 {
        return out;
    }
    // Bounding boxes per label: (y0, y1, x0, x1) inclusive.
    let mut bbox = vec![(usize::MAX, 0usize, usize::MAX, 0usize); n];
    for y in 0..h {
        for x in 0..w {
            let l = mask.at(y, x) as usize;
            if l > 0 {
                let b = &mut bbox[l - 1];
                b.0 = b.0.min(y);
                b.1 = b.1.max(y);
                b.2 = b.2.min(x);
                b.3 = b.3.max(x);
            }
        }
    }
    let mut f = Vec::new();
    let mut col = Vec::new();
    let mut tmp = Vec::new();
    let mut v = Vec::new();
    let mut z = Vec::new();
    for (li, &(y0, y1, x0, x1)) in bbox.iter().enumerate() {
        let label = li as u32 + 1;
        // Window with a one-pixel margin, in coordinates shifted by +1 so the
        // frame outside the image is addressable.
        let (wy0, wx0) = (y0, x0); // shifted: y0 - 1 + 1
        let wh = y1 - y0 + 3;
        let ww = x1 - x0 + 3;
        f.clear();
        f.resize(wh * ww, 0.0f64);
        for wy in 0..wh {
            for wx in 0..ww {
                let (gy, gx) = ((wy0 + wy) as isize - 1, (wx0 + wx) as isize - 1);
                let inside = gy >= 0 && gx >= 0 && (gy as usize) < h && (gx as usize) < w;
                if inside && mask.at(gy as usize, gx as usize) == label {
                    f[wy * ww + wx] = f64::INFINITY;
                }
            }
        }
        let len = wh.max(ww);
        col.resize(len, 0.0);
        tmp.resize(len, 0.0);
        v.resize(len, 0);
        z.resize(len + 1, 0.0);
        for wx in 0..ww {
            for wy in 0..wh {
                col[wy] = f[wy * ww + wx];
            }
            edt_1d(&col[..wh], &mut tmp[..wh], &mut v, &mut z);
            for wy in 0..wh {
                f[wy * ww + wx] = tmp[wy];
            }
        }
        for wy in 0..wh {
            col[..ww].copy_from_slice(&f[wy * ww..(wy + 1) * ww]);
            edt_1d(&col[..ww], &mut tmp[..ww], &mut v, &mut z);
            f[wy * ww..(wy + 1) * ww].copy_from_slice(&tmp[..ww]);
        }
        for wy in 1..wh - 1 {
            for wx in 1..ww - 1 {
                let (gy, gx) = (wy0 + wy - 1, wx0 + wx - 1);
                if mask.at(gy, gx) == label {
                    out[gy * w + gx] = f[wy * ww + wx].sqrt() as f32;
                }
            }
        }
    }
    out
}

/// Unit flow field pointing up the distance field, toward the skeleton.
///
/// Gradients use central differences over same-instance neighbours, one-sided
/// where only one neighbour belongs to the instance and zero where neither
/// does. Vectors shorter than [`FLOW_EPS`] become `(0, 0)`.
pub fn flow_field(d: &[f32], mask: &InstanceMask) -> Result<(Vec<f32>, Vec<f32>)> {
    let (h, w) = mask.shape();
    if d.len() != h * w {
        return Err(Error::Contract(format!(
            "distance field has {} values, mask is {h}x{w}",
            d.len()
        )));
    }
    let mut gx = vec![0f32; h * w];
    let mut gy = vec![0f32; h * w];
    let same = |y: isize, x: isize, l: u32| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.at(y as usize, x as usize) == l
    };
    let diff = |prev: Option<f64>, here: f64, next: Option<f64>| match (prev, next) {
        (Some(p), Some(n)) => (n - p) / 2.0,
        (None, Some(n)) => n - here,
        (Some(p), None) => here - p,
        (None, None) => 0.0,
    };
    for y in 0..h {
        for x in 0..w {
            let l = mask.at(y, x);
            if l == 0 {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let at = |yy: isize, xx: isize| {
                same(yy, xx, l).then(|| d[yy as usize * w + xx as usize] as f64)
            };
            let here = d[y * w + x] as f64;
            let dx = diff(at(yi, xi - 1), here, at(yi, xi + 1));
            let dy = diff(at(yi - 1, xi), here, at(yi + 1, xi));
            let norm = dx.hypot(dy);
            if norm > FLOW_EPS {
                gx[y * w + x] = (dx / norm) as f32;
                gy[y * w + x] = (dy / norm) as f32;
            }
        }
    }
    Ok((gx, gy))
}

/// 1 on cell pixels with at least one 4-neighbour of a different label; the
/// grid edge counts as different.
pub fn boundary_mask(mask: &InstanceMask) -> Vec<u8> {
    let (h, w) = mask.shape();
    let mut b = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = mask.at(y, x);
            if l == 0 {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let differs = edge
                || mask.at(y - 1, x) != l
                || mask.at(y + 1, x) != l
                || mask.at(y, x - 1) != l
                || mask.at(y, x + 1) != l;
            b[y * w + x] = differs as u8;
        }
    }
    b
}

pub fn make_targets(mask: &InstanceMask) -> TargetField {
    let d = distance_field(mask);
    let (gx, gy) = flow_field(&d, mask).expect("distance field built from the same mask");
    TargetField {
        h: mask.h(),
        w: mask.w(),
        d,
        gx,
        gy,
        b: boundary_mask(mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, rows: &[&[u32]]) -> InstanceMask {
        let raw = rows.iter().flat_map(|r| r.iter().copied()).collect();
        InstanceMask::from_raw(h, w, raw).unwrap()
    }

    fn centered_square(n: usize, side: usize) -> InstanceMask {
        let off = (n - side) / 2;
        let mut raw = vec![0; n * n];
        for y in off..off + side {
            for x in off..off + side {
                raw[y * n + x] = 1;
            }
        }
        InstanceMask::from_raw(n, n, raw).unwrap()
    }

    #[test]
    fn all_background_gives_zero_targets() {
        let m = InstanceMask::empty(6, 7);
        let t = make_targets(&m);
        assert!(t.d.iter().all(|&v| v == 0.0));
        assert!(t.b.iter().all(|&v| v == 0));
        assert!(t.gx.iter().chain(&t.gy).all(|&v| v == 0.0));
    }

    #[test]
    fn square_cell_ring_and_center() {
        let m = centered_square(5, 3);
        let d = distance_field(&m);
        for y in 1..4 {
            for x in 1..4 {
                let expect = if (y, x) == (2, 2) { 2.0 } else { 1.0 };
                assert_eq!(d[y * 5 + x], expect, "({y},{x})");
            }
        }
        let b = boundary_mask(&m);
        assert_eq!(b.iter().map(|&v| v as usize).sum::<usize>(), 8);
        assert_eq!(b[2 * 5 + 2], 0);
    }

    #[test]
    fn abutting_single_pixel_cells() {
        let m = mask(1, 4, &[&[0, 1, 2, 0]]);
        let d = distance_field(&m);
        assert_eq!(d, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn single_pixel_cell_is_border() {
        let m = mask(3, 3, &[&[0, 0, 0], &[0, 1, 0], &[0, 0, 0]]);
        assert_eq!(boundary_mask(&m)[4], 1);
    }

    #[test]
    fn bar_plateau_has_no_flow() {
        let m = mask(3, 7, &[&[0; 7], &[0, 1, 1, 1, 1, 1, 0], &[0; 7]]);
        let t = make_targets(&m);
        assert!(t.d[7..14].iter().filter(|&&v| v > 0.0).all(|&v| v == 1.0));
        assert!(t.gx.iter().chain(&t.gy).all(|&v| v == 0.0));
    }

    #[test]
    fn rectangle_top_row_flows_down() {
        let mut raw = vec![0u32; 5 * 7];
        for y in 1..4 {
            for x in 1..6 {
                raw[y * 7 + x] = 1;
            }
        }
        let m = InstanceMask::from_raw(5, 7, raw).unwrap();
        let t = make_targets(&m);
        let i = 7 + 3;
        assert_eq!((t.gx[i], t.gy[i]), (0.0, 1.0));
    }

    #[test]
    fn flow_rejects_shape_mismatch() {
        let m = InstanceMask::empty(3, 3);
        assert!(matches!(flow_field(&[0.0; 4], &m), Err(Error::Contract(_))));
    }

    #[test]
    fn edge_pixels_are_border_and_near_frame() {
        let m = InstanceMask::from_raw(4, 4, vec![1; 16]).unwrap();
        let t = make_targets(&m);
        assert_eq!(t.d[0], 1.0);
        assert_eq!(t.d[5], 2.0);
        assert_eq!(t.b[0], 1);
        assert_eq!(t.b[5], 0);
        t.check(&m).unwrap();
    }
}
