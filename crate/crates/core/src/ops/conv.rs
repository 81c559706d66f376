//! 2-D cross-correlation via im2col + GEMM.

use super::parallel;
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stride and zero padding of a convolution, as (vertical, horizontal).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub const fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dGeom { stride, padding }
    }
    /// Stride 1 with "same" padding for an odd `kh x kw` kernel.
    pub const fn same(kh: usize, kw: usize) -> Self {
        Conv2dGeom { stride: (1, 1), padding: (kh / 2, kw / 2) }
    }
    pub const fn unit() -> Self {
        Conv2dGeom { stride: (1, 1), padding: (0, 0) }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            bail!(Geometry, "conv2d stride must be >= 1, got {:?}", self.stride);
        }
        let (eh, ew) = (h + 2 * ph, w + 2 * pw);
        if eh < kh || ew < kw {
            bail!(Geometry, "conv2d kernel {kh}x{kw} larger than padded input {eh}x{ew}");
        }
        Ok(((eh - kh) / sh + 1, (ew - kw) / sw + 1))
    }
}

/// Saved im2col matrix, `[Ci*kh*kw, N*Ho*Wo]` row-major.
pub struct ConvSaved<S> {
    cols: Vec<S>,
    x_shape: Shape,
    out_shape: Shape,
}

/// `C[m x n] (+)= A[m x k] * B[k x n]` with row-major contiguous `C`, split
/// over row blocks when operator parallelism is enabled.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    (rsa, csa): (isize, isize),
    b: &[S],
    (rsb, csb): (isize, isize),
    c: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { S::one() } else { S::zero() };
    let rows_per_chunk = match parallel::threads() {
        0 => m,
        t => m.div_ceil(2 * t).max(8),
    };
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    parallel::for_each_chunk(c, rows_per_chunk * n, |i, chunk| {
        let rows = chunk.len() / n;
        let row0 = (i * rows_per_chunk) as isize;
        // SAFETY: a/b outlive the call; row offsets stay within `m` rows and
        // each chunk of `c` is a disjoint row block.
        unsafe {
            S::gemm(
                rows,
                k,
                n,
                S::one(),
                (a_ptr as *const S).offset(row0 * rsa),
                rsa,
                csa,
                b_ptr as *const S,
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

fn im2col<S: Scalar>(x: &Tensor<S>, kh: usize, kw: usize, geom: Conv2dGeom, ho: usize, wo: usize) -> Vec<S> {
    let s = x.shape();
    let (n_b, ci, h, w) = (s.n(), s.c(), s.h(), s.w());
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = n_b * ho * wo;
    let mut cols = vec![S::zero(); ci * kh * kw * p];
    let xd = x.data();
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * p..][..p];
                for n in 0..n_b {
                    let plane = &xd[(n * ci + c) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * sh + i) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[(n * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw + j) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(dcols: &[S], x_shape: Shape, kh: usize, kw: usize, geom: Conv2dGeom, ho: usize, wo: usize) -> Tensor<S> {
    let (n_b, ci, h, w) = (x_shape.n(), x_shape.c(), x_shape.h(), x_shape.w());
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let p = n_b * ho * wo;
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &dcols[((c * kh + i) * kw + j) * p..][..p];
                for n in 0..n_b {
                    let plane = &mut dxd[(n * ci + c) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * sh + i) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[(n * ho + oy) * wo..][..wo];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * sw + j) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `x` is `[N, Ci, H, W]`, `w` is `[Co, Ci, kh, kw]`, `bias` is `[1, Co, 1, 1]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: Conv2dGeom,
) -> Result<(Tensor<S>, ConvSaved<S>)> {
    let (xs, ws) = (x.shape(), w.shape());
    let [co, wci, kh, kw] = ws.0;
    if xs.c() != wci {
        bail!(Dimension, "conv2d: input has {} channels, weight {ws} expects {wci}", xs.c());
    }
    if let Some(b) = bias {
        if b.numel() != co {
            bail!(Dimension, "conv2d: bias {} does not match {co} output channels", b.shape());
        }
    }
    let (ho, wo) = geom.output_size(xs.h(), xs.w(), kh, kw)?;
    let k = wci * kh * kw;
    let hw_o = ho * wo;
    let p = xs.n() * hw_o;
    let cols = im2col(x, kh, kw, geom, ho, wo);

    let mut out_mat = vec![S::zero(); co * p];
    matmul(co, k, p, w.data(), (k as isize, 1), &cols, (p as isize, 1), &mut out_mat, false);

    let out_shape = Shape::new(xs.n(), co, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let od = out.data_mut();
    for o in 0..co {
        let b = bias.map_or(S::zero(), |b| b.data()[o]);
        for n in 0..xs.n() {
            let src = &out_mat[o * p + n * hw_o..][..hw_o];
            let dst = &mut od[(n * co + o) * hw_o..][..hw_o];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    Ok((out, ConvSaved { cols, x_shape: xs, out_shape }))
}

/// Gradients of `conv2d` with respect to (input, weight, bias). Each is only
/// computed when requested.
pub fn conv2d_backward<S: Scalar>(
    saved: &ConvSaved<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    geom: Conv2dGeom,
    need: (bool, bool, bool),
) -> (Option<Tensor<S>>, Option<Tensor<S>>, Option<Tensor<S>>) {
    let [co, ci, kh, kw] = w.shape().0;
    let os = saved.out_shape;
    let (ho, wo) = (os.h(), os.w());
    let hw_o = ho * wo;
    let p = os.n() * hw_o;
    let k = ci * kh * kw;

    let mut dy_mat = vec![S::zero(); co * p];
    for o in 0..co {
        for n in 0..os.n() {
            dy_mat[o * p + n * hw_o..][..hw_o].copy_from_slice(&dy.data()[(n * co + o) * hw_o..][..hw_o]);
        }
    }

    let dx = need.0.then(|| {
        let mut dcols = vec![S::zero(); k * p];
        matmul(k, co, p, w.data(), (1, k as isize), &dy_mat, (p as isize, 1), &mut dcols, false);
        col2im(&dcols, saved.x_shape, kh, kw, geom, ho, wo)
    });
    let dw = need.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        matmul(co, p, k, &dy_mat, (p as isize, 1), &saved.cols, (1, p as isize), dw.data_mut(), false);
        dw
    });
    let db = need.2.then(|| {
        let data = (0..co).map(|o| dy_mat[o * p..(o + 1) * p].iter().fold(S::zero(), |a, &v| a + v)).collect();
        Tensor::from_vec(Shape::vector(co), data).expect("co values")
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    /// Direct sliding-window reference.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, geom: Conv2dGeom) -> Tensor<f64> {
        let [n_b, ci, h, wd] = x.shape().0;
        let [co, _, kh, kw] = w.shape().0;
        let (ho, wo) = geom.output_size(h, wd, kh, kw).unwrap();
        let mut out = Tensor::zeros(Shape::new(n_b, co, ho, wo));
        for n in 0..n_b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * geom.stride.0 + i) as isize - geom.padding.0 as isize;
                                    let ix = (ox * geom.stride.1 + j) as isize - geom.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, i, j);
                                    }
                                }
                            }
                        }
                        let idx = out.index(n, o, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn three_by_three_sum_example() {
        let x = Tensor::<f64>::from_f64s(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let (y, _) = conv2d(&x, &w, None, Conv2dGeom::same(3, 3)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        assert_eq!(y.at(0, 0, 0, 0), 12.0);
        assert_eq!(y, conv_oracle(&x, &w, Conv2dGeom::same(3, 3)));
    }

    #[test]
    fn identity_kernel_and_bias_only() {
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 1, 5, 4), -1.0, 1.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        assert_eq!(conv2d(&x, &w, None, Conv2dGeom::unit()).unwrap().0, x);

        let z = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 3, 3, 3), -1.0, 1.0);
        let b = Tensor::from_f64s(Shape::vector(2), &[0.5, -2.0]).unwrap();
        let (y, _) = conv2d(&z, &w, Some(&b), Conv2dGeom::same(3, 3)).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn matches_oracle_on_strided_rectangular_kernels() {
        let mut rng = Rng::new(2);
        for &(kh, kw, geom) in &[
            (3, 3, Conv2dGeom::new((2, 2), (1, 1))),
            (1, 7, Conv2dGeom::new((1, 1), (0, 3))),
            (7, 1, Conv2dGeom::new((1, 1), (3, 0))),
            (7, 7, Conv2dGeom::new((4, 4), (3, 3))),
        ] {
            let x: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 3, 9, 8), -1.0, 1.0);
            let w: Tensor<f64> = rng.uniform_tensor(Shape::new(4, 3, kh, kw), -1.0, 1.0);
            let (y, _) = conv2d(&x, &w, None, geom).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &w, geom)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn shape_and_geometry_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(conv2d(&x, &w, None, Conv2dGeom::unit()), Err(crate::Error::Dimension(_))));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        assert!(matches!(conv2d(&x, &w, None, Conv2dGeom::unit()), Err(crate::Error::Geometry(_))));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        assert!(matches!(conv2d(&x, &w, None, Conv2dGeom::new((0, 1), (0, 0))), Err(crate::Error::Geometry(_))));
    }

    #[test]
    fn parallel_path_is_bit_identical() {
        let mut rng = Rng::new(5);
        let x: Tensor<f32> = rng.uniform_tensor(Shape::new(3, 16, 12, 12), -1.0, 1.0);
        let w: Tensor<f32> = rng.uniform_tensor(Shape::new(40, 16, 3, 3), -1.0, 1.0);
        let dy: Tensor<f32> = rng.uniform_tensor(Shape::new(3, 40, 12, 12), -1.0, 1.0);
        let geom = Conv2dGeom::same(3, 3);
        let run = || {
            let (y, saved) = conv2d(&x, &w, None, geom).unwrap();
            let (dx, dw, _) = conv2d_backward(&saved, &w, &dy, geom, (true, true, false));
            (y, dx.unwrap(), dw.unwrap())
        };
        let seq = run();
        parallel::set_threads(3);
        let par = run();
        parallel::set_threads(0);
        assert!(seq == par);
    }
}
