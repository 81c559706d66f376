//! Multi-head scaled dot-product attention over the `H*W` tokens of a
//! feature map. Queries, keys and values are `[N, E, H, W]` with `E` split
//! into `heads` contiguous channel blocks.

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Attention probabilities per (batch, head), each `L x L` row-major.
pub struct AttentionSaved<S> {
    probs: Vec<S>,
}

pub fn multi_head_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
) -> Result<(Tensor<S>, AttentionSaved<S>)> {
    let s = q.shape();
    q.expect_same_shape(k, "attention q/k")?;
    q.expect_same_shape(v, "attention q/v")?;
    if heads == 0 || s.c() % heads != 0 {
        bail!(Config, "attention: {} channels not divisible by {heads} heads", s.c());
    }
    let (e, l) = (s.c(), s.hw());
    let d = e / heads;
    let scale = S::one() / S::from_f64(d as f64).sqrt();
    let mut out = Tensor::zeros(s);
    let mut probs = vec![S::zero(); s.n() * heads * l * l];
    let li = l as isize;
    for n in 0..s.n() {
        for h in 0..heads {
            let base = (n * e + h * d) * l;
            let a = &mut probs[(n * heads + h) * l * l..][..l * l];
            // SAFETY: every operand is a d x L block inside its tensor and `a`
            // is an exclusive L x L buffer.
            unsafe {
                S::gemm(l, d, l, scale, q.data()[base..].as_ptr(), 1, li, k.data()[base..].as_ptr(), li, 1, S::zero(), a.as_mut_ptr(), li, 1);
            }
            for row in a.chunks_mut(l) {
                let m = row.iter().fold(S::neg_infinity(), |acc, &x| acc.max(x));
                let mut z = S::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            let o = &mut out.data_mut()[base..base + d * l];
            unsafe {
                S::gemm(l, l, d, S::one(), a.as_ptr(), li, 1, v.data()[base..].as_ptr(), 1, li, S::zero(), o.as_mut_ptr(), 1, li);
            }
        }
    }
    Ok((out, AttentionSaved { probs }))
}

/// Gradients with respect to (q, k, v).
pub fn multi_head_attention_backward<S: Scalar>(
    saved: &AttentionSaved<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    dout: &Tensor<S>,
    heads: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let s = q.shape();
    let (e, l) = (s.c(), s.hw());
    let d = e / heads;
    let scale = S::one() / S::from_f64(d as f64).sqrt();
    let li = l as isize;
    let (mut dq, mut dk, mut dv) = (Tensor::zeros(s), Tensor::zeros(s), Tensor::zeros(s));
    let mut da = vec![S::zero(); l * l];
    for n in 0..s.n() {
        for h in 0..heads {
            let base = (n * e + h * d) * l;
            let a = &saved.probs[(n * heads + h) * l * l..][..l * l];
            let go = dout.data()[base..].as_ptr();
            // SAFETY: as in the forward pass; outputs are disjoint d x L blocks.
            unsafe {
                // dV = A^T dO
                S::gemm(l, l, d, S::one(), a.as_ptr(), 1, li, go, 1, li, S::zero(), dv.data_mut()[base..].as_mut_ptr(), 1, li);
                // dA = dO V^T
                S::gemm(l, d, l, S::one(), go, 1, li, v.data()[base..].as_ptr(), li, 1, S::zero(), da.as_mut_ptr(), li, 1);
            }
            // Softmax backward, folded with the 1/sqrt(d) scale.
            for (arow, drow) in a.chunks(l).zip(da.chunks_mut(l)) {
                let dot = arow.iter().zip(drow.iter()).fold(S::zero(), |acc, (&p, &g)| acc + p * g);
                for (g, &p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            unsafe {
                // dQ = dS K
                S::gemm(l, l, d, S::one(), da.as_ptr(), li, 1, k.data()[base..].as_ptr(), 1, li, S::zero(), dq.data_mut()[base..].as_mut_ptr(), 1, li);
                // dK = dS^T Q
                S::gemm(l, l, d, S::one(), da.as_ptr(), 1, li, q.data()[base..].as_ptr(), 1, li, S::zero(), dk.data_mut()[base..].as_mut_ptr(), 1, li);
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::Rng;

    /// Per-token loop reference.
    fn oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Tensor<f64> {
        let s = q.shape();
        let (e, l) = (s.c(), s.hw());
        let d = e / heads;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n() {
            for h in 0..heads {
                for i in 0..l {
                    let scores: Vec<f64> = (0..l)
                        .map(|t| (0..d).map(|j| q.plane(n, h * d + j)[i] * k.plane(n, h * d + j)[t]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..d {
                        let val: f64 = (0..l).map(|t| (scores[t] - m).exp() / z * v.plane(n, h * d + j)[t]).sum();
                        let idx = (n * e + h * d + j) * l + i;
                        out.data_mut()[idx] = val;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(21);
        let sh = Shape::new(2, 6, 3, 4);
        let q: Tensor<f64> = rng.uniform_tensor(sh, -1.0, 1.0);
        let k: Tensor<f64> = rng.uniform_tensor(sh, -1.0, 1.0);
        let v: Tensor<f64> = rng.uniform_tensor(sh, -1.0, 1.0);
        let (y, _) = multi_head_attention(&q, &k, &v, 2).unwrap();
        assert!(y.max_abs_diff(&oracle(&q, &k, &v, 2)).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_passes_values_through() {
        let mut rng = Rng::new(22);
        let sh = Shape::new(1, 4, 1, 1);
        let (q, k, v): (Tensor<f64>, Tensor<f64>, Tensor<f64>) =
            (rng.uniform_tensor(sh, -1.0, 1.0), rng.uniform_tensor(sh, -1.0, 1.0), rng.uniform_tensor(sh, -1.0, 1.0));
        let (y, _) = multi_head_attention(&q, &k, &v, 2).unwrap();
        assert!(y.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 5, 2, 2));
        assert!(multi_head_attention(&x, &x, &x, 2).is_err());
    }
}
