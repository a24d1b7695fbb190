//! Real-valued kernels over flat row-major buffers.
//!
//! These are shared by the per-sample layer forward passes and by the
//! autograd tape, so a quaternion layer and its gradient run exactly the
//! same arithmetic on each plane.

use crate::error::{Error, Result};
use crate::qtensor::Scalar;

/// Geometry of a 2-D convolution over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Config("convolution needs positive kernel and stride".into()));
        }
        if self.in_h + 2 * self.pad < self.kh || self.in_w + 2 * self.pad < self.kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                self.in_h + 2 * self.pad,
                self.in_w + 2 * self.pad
            )));
        }
        Ok(())
    }
}

/// Convolves one image; `out` must hold `geom.out_len()` values and is
/// overwritten.
pub fn conv2d_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (h, wd, pad, s) = (geom.in_h as isize, geom.in_w as isize, geom.pad as isize, geom.stride);
    out.iter_mut().for_each(|v| *v = T::zero());
    for o in 0..geom.out_c {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geom.in_c {
            let xc = &x[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let wv = w[((o * geom.in_c + c) * geom.kh + ky) * geom.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row = &xc[iy as usize * geom.in_w..(iy as usize + 1) * geom.in_w];
                        let orow = &mut out_o[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < wd {
                                *ov = *ov + wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂x` into `dx` and `∂L/∂w` into `dw` for one image.
pub fn conv2d_backward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (h, wd, pad, s) = (geom.in_h as isize, geom.in_w as isize, geom.pad as isize, geom.stride);
    for o in 0..geom.out_c {
        let dy_o = &dy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geom.in_c {
            let base = c * geom.in_h * geom.in_w;
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let widx = ((o * geom.in_c + c) * geom.kh + ky) * geom.kw + kx;
                    let wv = w[widx];
                    let mut gw = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let roff = base + iy as usize * geom.in_w;
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd {
                                continue;
                            }
                            let g = dy_o[oy * ow + ox];
                            gw = gw + g * x[roff + ix as usize];
                            dx[roff + ix as usize] = dx[roff + ix as usize] + g * wv;
                        }
                    }
                    dw[widx] = dw[widx] + gw;
                }
            }
        }
    }
}

/// `out[r] = Σ_k w[r, k] x[k]` for a row-major `[rows, x.len()]` matrix.
pub fn matvec<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = w[r * n..(r + 1) * n].iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// Geometry of a pooling window over `[C, H, W]` without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("pooling needs positive window and stride".into()));
        }
        if self.h < self.window
            || self.w < self.window
            || !(self.h - self.window).is_multiple_of(self.stride)
            || !(self.w - self.window).is_multiple_of(self.stride)
        {
            return Err(Error::ShapeMismatch(format!(
                "pool window {} stride {} does not tile {}x{}",
                self.window, self.stride, self.h, self.w
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h - self.window) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.window) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.c * self.out_h() * self.out_w()
    }

    /// Calls `f(out_index, input_indices_in_row_major_order)` per window.
    pub fn for_each_window(&self, mut f: impl FnMut(usize, &[usize])) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut idx = Vec::with_capacity(self.window * self.window);
        for c in 0..self.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    idx.clear();
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let (y, x) = (oy * self.stride + dy, ox * self.stride + dx);
                            idx.push((c * self.h + y) * self.w + x);
                        }
                    }
                    f((c * oh + oy) * ow + ox, &idx);
                }
            }
        }
    }

    /// Input index of the largest `score` in each window; ties go to the
    /// lowest index.
    pub fn argmax<T: Scalar>(&self, score: &[T]) -> Vec<usize> {
        let mut out = vec![0; self.out_len()];
        self.for_each_window(|o, idx| {
            let mut best = idx[0];
            for &i in &idx[1..] {
                if score[i] > score[best] {
                    best = i;
                }
            }
            out[o] = best;
        });
        out
    }

    pub fn average<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_len()];
        let inv = T::of(1.0 / (self.window * self.window) as f64);
        self.for_each_window(|o, idx| {
            out[o] = idx.iter().fold(T::zero(), |acc, &i| acc + x[i]) * inv;
        });
        out
    }
}

/// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out[(ci * oh + y) * ow + xo] = x[(ci * h + y / factor) * w + xo / factor];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Direct definition of cross-correlation with zero padding.
    fn conv_reference(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..g.out_h() {
                for ox in 0..g.out_w() {
                    let mut acc = 0.0;
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    acc += w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx]
                                        * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * g.out_h() + oy) * g.out_w() + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom { in_c: 2, in_h: 6, in_w: 5, out_c: 3, kh: 3, kw: 3, stride, pad };
            let x: Vec<f64> = (0..g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; g.out_len()];
            conv2d_forward(&g, &x, &w, &mut out);
            for (a, b) in out.iter().zip(conv_reference(&g, &x, &w)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <dy, conv(x)> must equal <dx, x> for the input gradient and
        // <dw, w> for the weight gradient, since conv is bilinear.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ConvGeom { in_c: 2, in_h: 5, in_w: 5, out_c: 2, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy: Vec<f64> = (0..g.out_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; g.out_len()];
        conv2d_forward(&g, &x, &w, &mut y);
        let (mut dx, mut dw) = (vec![0.0; x.len()], vec![0.0; w.len()]);
        conv2d_backward(&g, &x, &w, &dy, &mut dx, &mut dw);
        let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-12);
        assert!((lhs - via_w).abs() < 1e-12);
    }

    #[test]
    fn pool_geometry() {
        let g = PoolGeom { c: 1, h: 4, w: 4, window: 2, stride: 2 };
        g.validate().unwrap();
        assert!(PoolGeom { c: 1, h: 5, w: 4, window: 2, stride: 2 }.validate().is_err());
        let score = vec![1.0, 3.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 5.0, 5.0];
        assert_eq!(g.argmax(&score), vec![1, 2, 8, 10]);
        let avg = g.average(&score);
        assert_eq!(avg, vec![2.25, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn upsample_repeats() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let up = upsample_nearest(&x, 1, 2, 2, 2);
        assert_eq!(up[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up[12..], [3.0, 3.0, 4.0, 4.0]);
    }
}
