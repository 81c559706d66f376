//! Average pooling and bilinear resampling.

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeom {
    fn out_len(&self, len: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            bail!(Geometry, "avg_pool2d kernel/stride must be >= 1: {self:?}");
        }
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            bail!(Geometry, "avg_pool2d kernel {} larger than padded extent {padded}", self.kernel);
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Valid input window `[lo, hi)` of output index `o`.
    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

/// Average pooling that divides by the number of in-bounds elements
/// (padding is not counted).
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, geom: PoolGeom) -> Result<Tensor<S>> {
    let s = x.shape();
    let (ho, wo) = (geom.out_len(s.h())?, geom.out_len(s.w())?);
    let mut y = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
    for n in 0..s.n() {
        for c in 0..s.c() {
            let plane = x.plane(n, c);
            let base = y.index(n, c, 0, 0);
            for oy in 0..ho {
                let (y0, y1) = geom.window(oy, s.h());
                for ox in 0..wo {
                    let (x0, x1) = geom.window(ox, s.w());
                    let mut acc = S::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += plane[iy * s.w() + ix];
                        }
                    }
                    let cnt = ((y1 - y0) * (x1 - x0)).max(1);
                    y.data_mut()[base + oy * wo + ox] = acc / S::from_f64(cnt as f64);
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2d_backward<S: Scalar>(x_shape: Shape, dy: &Tensor<S>, geom: PoolGeom) -> Tensor<S> {
    let (ho, wo) = (dy.shape().h(), dy.shape().w());
    let mut dx = Tensor::zeros(x_shape);
    let (h, w) = (x_shape.h(), x_shape.w());
    for n in 0..x_shape.n() {
        for c in 0..x_shape.c() {
            let base = dx.index(n, c, 0, 0);
            for oy in 0..ho {
                let (y0, y1) = geom.window(oy, h);
                for ox in 0..wo {
                    let (x0, x1) = geom.window(ox, w);
                    let cnt = ((y1 - y0) * (x1 - x0)).max(1);
                    let g = dy.at(n, c, oy, ox) / S::from_f64(cnt as f64);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            dx.data_mut()[base + iy * w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean over each (n, c) plane, giving `[N, C, 1, 1]`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.hw() == 0 {
        bail!(Geometry, "global_avg_pool over an empty plane");
    }
    let cnt = S::from_f64(s.hw() as f64);
    let data = x.data().chunks(s.hw()).map(|p| p.iter().fold(S::zero(), |a, &v| a + v) / cnt).collect();
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data)
}

pub fn global_avg_pool_backward<S: Scalar>(x_shape: Shape, dy: &Tensor<S>) -> Tensor<S> {
    let hw = x_shape.hw();
    let cnt = S::from_f64(hw as f64);
    let mut dx = Tensor::zeros(x_shape);
    for (p, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        p.fill(g / cnt);
    }
    dx
}

/// Interpolation taps for one axis: (lower index, upper index, upper weight).
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers. Same-size input is returned
/// unchanged.
pub fn bilinear_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h() == 0 || s.w() == 0 {
        bail!(Geometry, "bilinear_resize {s} -> {out_h}x{out_w}");
    }
    if out_h == s.h() && out_w == s.w() {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps(s.h(), out_h), taps(s.w(), out_w));
    let mut y = Tensor::zeros(Shape::new(s.n(), s.c(), out_h, out_w));
    let ohw = out_h * out_w;
    for (p, dst) in x.data().chunks(s.hw()).zip(y.data_mut().chunks_mut(ohw)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::from_f64(fx);
                let top = p[y0 * s.w() + x0] * (S::one() - fx) + p[y0 * s.w() + x1] * fx;
                let bot = p[y1 * s.w() + x0] * (S::one() - fx) + p[y1 * s.w() + x1] * fx;
                dst[oy * out_w + ox] = top * (S::one() - fy) + bot * fy;
            }
        }
    }
    Ok(y)
}

pub fn bilinear_resize_backward<S: Scalar>(x_shape: Shape, dy: &Tensor<S>) -> Tensor<S> {
    let (out_h, out_w) = (dy.shape().h(), dy.shape().w());
    if out_h == x_shape.h() && out_w == x_shape.w() {
        return dy.clone();
    }
    let (ty, tx) = (taps(x_shape.h(), out_h), taps(x_shape.w(), out_w));
    let w = x_shape.w();
    let mut dx = Tensor::zeros(x_shape);
    let ohw = out_h * out_w;
    for (p, src) in dx.data_mut().chunks_mut(x_shape.hw()).zip(dy.data().chunks(ohw)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::from_f64(fx);
                let g = src[oy * out_w + ox];
                let (gt, gb) = (g * (S::one() - fy), g * fy);
                p[y0 * w + x0] += gt * (S::one() - fx);
                p[y0 * w + x1] += gt * fx;
                p[y1 * w + x0] += gb * (S::one() - fx);
                p[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn resize_two_by_two_to_four_by_four() {
        let x = Tensor::<f64>::from_f64s(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!([y.at(0, 0, 0, 0), y.at(0, 0, 0, 3), y.at(0, 0, 3, 0), y.at(0, 0, 3, 3)], [1.0, 2.0, 3.0, 4.0]);
        let center = [y.at(0, 0, 1, 1), y.at(0, 0, 1, 2), y.at(0, 0, 2, 1), y.at(0, 0, 2, 2)];
        for (a, b) in center.iter().zip([1.75, 2.25, 2.75, 3.25]) {
            assert!((a - b).abs() < 1e-12, "{center:?}");
        }
    }

    #[test]
    fn resize_identity_and_constants() {
        let mut rng = Rng::new(8);
        let x: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 3, 5, 7), -1.0, 1.0);
        assert!(bilinear_resize(&x, 5, 7).unwrap() == x);
        let c = Tensor::<f32>::full(Shape::new(1, 2, 3, 5), 0.25);
        let y = bilinear_resize(&c, 8, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::<f64>::from_f64s(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let full = avg_pool2d(&x, PoolGeom { kernel: 2, stride: 2, padding: 0 }).unwrap();
        assert_eq!(full, global_avg_pool(&x).unwrap());

        let c = Tensor::<f64>::full(Shape::new(1, 1, 9, 9), 3.0);
        let y = avg_pool2d(&c, PoolGeom { kernel: 5, stride: 2, padding: 2 }).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn pooling_excludes_padding_from_count() {
        let x = Tensor::<f64>::from_f64s(Shape::new(1, 1, 1, 2), &[2.0, 4.0]).unwrap();
        let y = avg_pool2d(&x, PoolGeom { kernel: 3, stride: 1, padding: 1 }).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
        assert!(avg_pool2d(&x, PoolGeom { kernel: 5, stride: 1, padding: 0 }).is_err());
    }
}
