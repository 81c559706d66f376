//! Numeric kernels. Every operator is a pure function of its inputs with a
//! matching backward function; `autograd` wires them into a tape.

pub mod attention;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod parallel;
pub mod pool;

pub use attention::{multi_head_attention, multi_head_attention_backward};
pub use conv::{conv2d, conv2d_backward, Conv2dGeom};
pub use loss::{cross_entropy_logits, cwd_loss, kl_loss, l2_loss, CrossEntropy};
pub use norm::{batchnorm2d, group_l2_normalize, softmax_spatial, BnMode, RunningStats};
pub use pool::{avg_pool2d, bilinear_resize, global_avg_pool, PoolGeom};

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient of `relu`; the subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > S::zero() { g } else { S::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Concatenates along the channel axis, in argument order.
pub fn concat_channels<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = xs.first() else {
        bail!(Dimension, "concat_channels of an empty list");
    };
    let s0 = first.shape();
    for x in xs {
        let s = x.shape();
        if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
            bail!(Dimension, "concat_channels: {s} incompatible with {s0}");
        }
    }
    let c_total: usize = xs.iter().map(|x| x.shape().c()).sum();
    let out_shape = Shape::new(s0.n(), c_total, s0.h(), s0.w());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s0.n() {
        for x in xs {
            let per = x.shape().c() * s0.hw();
            data.extend_from_slice(&x.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if start + len > s.c() {
        bail!(Dimension, "slice_channels [{start}, {}) out of {} channels", start + len, s.c());
    }
    let hw = s.hw();
    let mut data = Vec::with_capacity(s.n() * len * hw);
    for n in 0..s.n() {
        let off = (n * s.c() + start) * hw;
        data.extend_from_slice(&x.data()[off..off + len * hw]);
    }
    Tensor::from_vec(Shape::new(s.n(), len, s.h(), s.w()), data)
}

/// Adds `src` into channels `[start, start + src.c)` of `dst`.
pub(crate) fn add_into_channels<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, start: usize) {
    let (ds, ss) = (dst.shape(), src.shape());
    let hw = ds.hw();
    for n in 0..ds.n() {
        let doff = (n * ds.c() + start) * hw;
        let soff = n * ss.c() * hw;
        let len = ss.c() * hw;
        for (d, &v) in dst.data_mut()[doff..doff + len].iter_mut().zip(&src.data()[soff..soff + len]) {
            *d += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::from_f64s(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let x = Tensor::<f64>::from_f64s(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]).unwrap();
        let dy = Tensor::full(x.shape(), 1.0);
        assert_eq!(relu_backward(&x, &dy).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut rng = crate::Rng::new(3);
        let a: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 3, 4, 5), -1.0, 1.0);
        let b: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 2, 4, 5), -1.0, 1.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape().c(), 5);
        assert_eq!(slice_channels(&c, 0, 3).unwrap(), a);
        assert_eq!(slice_channels(&c, 3, 2).unwrap(), b);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 5));
        assert!(matches!(concat_channels(&[&a, &b]), Err(crate::Error::Dimension(_))));
    }
}
