//! Forward and backward kernels for the layers of the encoder-decoder.
//! Activations are channel-major `[c][h][w]` buffers.

use crate::real::Real;

/// Unfolds a 3x3 zero-padded neighbourhood: `cols[(c*9 + ky*3 + kx)][y*w + x]`.
pub fn im2col3<T>(input: &[T], c: usize, h: usize, w: usize, cols: &mut Vec<T>)
where
    T: Real,
{
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, T::zero());
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates column gradients back onto the input.
pub fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    out[..c * hw].iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let plane = &mut out[ci * hw + sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    for x in x_lo..x_hi {
                        plane[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// `out[co][p] = sum_k weight[co][k] * cols[k][p] + bias[co]`.
pub fn conv_forward<T: Real>(
    weight: &[T],
    bias: &[T],
    cols: &[T],
    cout: usize,
    k: usize,
    hw: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    out.reserve(cout * hw);
    for &b in bias.iter().take(cout) {
        out.extend(std::iter::repeat_n(b, hw));
    }
    T::gemm(cout, k, hw, weight, false, cols, false, T::one(), out);
}

/// Accumulates weight and bias gradients and, when requested, returns the
/// gradient with respect to `cols`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    weight: &[T],
    cols: &[T],
    d_out: &[T],
    cout: usize,
    k: usize,
    hw: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
    d_cols: Option<&mut Vec<T>>,
) {
    T::gemm(cout, hw, k, d_out, false, cols, true, T::one(), d_weight);
    for (co, db) in d_bias.iter_mut().enumerate().take(cout) {
        *db += d_out[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
    }
    if let Some(dc) = d_cols {
        dc.clear();
        dc.resize(k * hw, T::zero());
        T::gemm(k, cout, hw, weight, true, d_out, false, T::zero(), dc);
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(pre: &[T]) -> Vec<T> {
    pre.iter().map(|&x| x * sigmoid(x)).collect()
}

pub fn silu_backward<T: Real>(pre: &[T], d_out: &mut [T]) {
    for (g, &x) in d_out.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g *= s * (T::one() + x * (T::one() - s));
    }
}

/// 2x2 max pooling; `argmax` records the flat input index of each winner.
pub fn maxpool2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(d_out: &[T], argmax: &[u32], d_in: &mut [T]) {
    d_in.iter_mut().for_each(|v| *v = T::zero());
    for (&g, &j) in d_out.iter().zip(argmax) {
        d_in[j as usize] += g;
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ci * oh * ow + y * ow + x] = input[ci * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(d_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_in = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                d_in[ci * h * w + (y / 2) * w + x / 2] += d_out[ci * oh * ow + y * ow + x];
            }
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = Vec::new();
        im2col3(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im3(&y, c, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let mut cols = Vec::new();
        im2col3(&x, 1, 3, 4, &mut cols);
        assert_eq!(&cols[4 * 12..5 * 12], &x[..]);
        // top-left tap of pixel (0, 0) falls outside the image
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = [1.0f64, 5.0, 2.0, 3.0];
        let (out, arg) = maxpool2(&x, 1, 2, 2);
        assert_eq!(out, vec![5.0]);
        let mut d = vec![0.0; 4];
        maxpool2_backward(&[2.0], &arg, &mut d);
        assert_eq!(d, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let up = upsample2(&[1.0f64, 2.0], 1, 1, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let d = upsample2_backward(&[1.0f64; 8], 1, 1, 2);
        assert_eq!(d, vec![4.0, 4.0]);
    }
}
