//! Scalar losses. Each returns the value together with its gradient with
//! respect to the first (prediction / student) argument; targets are treated
//! as constants.

use super::norm::softmax_into;
use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Result of a pixel-wise cross entropy.
#[derive(Debug, Clone)]
pub struct CrossEntropy<S: Scalar> {
    pub loss: S,
    pub grad: Tensor<S>,
    /// Number of pixels that contributed.
    pub counted: usize,
    /// Set when every pixel carried `ignore_index`; the loss is then 0.
    pub all_ignored: bool,
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy_logits<S: Scalar>(logits: &Tensor<S>, labels: &[i32], ignore_index: i32) -> Result<CrossEntropy<S>> {
    let s = logits.shape();
    let (k, hw) = (s.c(), s.hw());
    if labels.len() != s.n() * hw {
        bail!(Dimension, "cross_entropy: {} labels for logits {s}", labels.len());
    }
    for &l in labels {
        if l != ignore_index && (l < 0 || l as usize >= k) {
            bail!(Data, "label {l} outside [0, {k}) and not the ignore index {ignore_index}");
        }
    }
    let counted = labels.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Tensor::zeros(s);
    if counted == 0 {
        log::warn!("cross_entropy: every pixel is ignored; returning 0");
        return Ok(CrossEntropy { loss: S::zero(), grad, counted, all_ignored: true });
    }
    let inv = S::one() / S::from_f64(counted as f64);
    let mut total = S::zero();
    let ld = logits.data();
    let mut probs = vec![S::zero(); k];
    for n in 0..s.n() {
        for p in 0..hw {
            let label = labels[n * hw + p];
            if label == ignore_index {
                continue;
            }
            let at = |c: usize| (n * k + c) * hw + p;
            let m = (0..k).fold(S::neg_infinity(), |a, c| a.max(ld[at(c)]));
            let mut z = S::zero();
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (ld[at(c)] - m).exp();
                z += *pr;
            }
            let l = label as usize;
            total += z.ln() + m - ld[at(l)];
            let g = grad.data_mut();
            for (c, &pr) in probs.iter().enumerate() {
                g[at(c)] = pr / z * inv;
            }
            g[at(l)] -= inv;
        }
    }
    Ok(CrossEntropy { loss: total * inv, grad, counted, all_ignored: false })
}

/// Per-plane log-softmax with temperature, computed stably.
fn log_softmax_plane<S: Scalar>(src: &[S], t: S, dst: &mut [S]) {
    let m = src.iter().fold(S::neg_infinity(), |a, &v| a.max(v / t));
    let z = src.iter().fold(S::zero(), |a, &v| a + (v / t - m).exp());
    let lz = z.ln() + m;
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = v / t - lz;
    }
}

/// Channel-wise distillation: KL between per-channel spatial softmaxes of
/// teacher and student at temperature `t`, scaled by `t^2 / C` and averaged
/// over the batch.
pub fn cwd_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, t: S) -> Result<(S, Tensor<S>)> {
    student.expect_same_shape(teacher, "cwd_loss")?;
    if !(t > S::zero()) {
        bail!(Config, "cwd_loss temperature must be positive");
    }
    let s = student.shape();
    let hw = s.hw();
    let norm = t * t / S::from_f64((s.n() * s.c()) as f64);
    let mut grad = Tensor::zeros(s);
    let mut total = S::zero();
    let (mut lp_s, mut lp_t, mut p_s) = (vec![S::zero(); hw], vec![S::zero(); hw], vec![S::zero(); hw]);
    for ((xs, xt), g) in student.data().chunks(hw).zip(teacher.data().chunks(hw)).zip(grad.data_mut().chunks_mut(hw)) {
        log_softmax_plane(xs, t, &mut lp_s);
        log_softmax_plane(xt, t, &mut lp_t);
        softmax_into(xs, t, &mut p_s);
        let mut kl = S::zero();
        for i in 0..hw {
            let pt = lp_t[i].exp();
            kl += pt * (lp_t[i] - lp_s[i]);
            g[i] = norm / t * (p_s[i] - pt);
        }
        total += kl;
    }
    Ok((total * norm, grad))
}

/// KL divergence between channel-axis softmaxes at every pixel, at
/// temperature `t`, scaled by `t^2` and averaged over pixels.
pub fn kl_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, t: S) -> Result<(S, Tensor<S>)> {
    student.expect_same_shape(teacher, "kl_loss")?;
    if !(t > S::zero()) {
        bail!(Config, "kl_loss temperature must be positive");
    }
    let s = student.shape();
    let (c, hw) = (s.c(), s.hw());
    let pixels = S::from_f64((s.n() * hw) as f64);
    let norm = t * t / pixels;
    let mut grad = Tensor::zeros(s);
    let mut total = S::zero();
    let (mut vs, mut vt, mut lp_s, mut lp_t) = (vec![S::zero(); c], vec![S::zero(); c], vec![S::zero(); c], vec![S::zero(); c]);
    for n in 0..s.n() {
        for p in 0..hw {
            for ch in 0..c {
                let i = (n * c + ch) * hw + p;
                vs[ch] = student.data()[i];
                vt[ch] = teacher.data()[i];
            }
            log_softmax_plane(&vs, t, &mut lp_s);
            log_softmax_plane(&vt, t, &mut lp_t);
            for ch in 0..c {
                let (pt, ps) = (lp_t[ch].exp(), lp_s[ch].exp());
                total += pt * (lp_t[ch] - lp_s[ch]);
                grad.data_mut()[(n * c + ch) * hw + p] = norm / t * (ps - pt);
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean squared difference.
pub fn l2_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    student.expect_same_shape(teacher, "l2_loss")?;
    let n = S::from_f64(student.numel() as f64);
    let mut total = S::zero();
    let grad = student.zip_map(teacher, |a, b| {
        let d = a - b;
        total += d * d;
        S::from_f64(2.0) * d / n
    })?;
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::Rng;

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 6, 3, 3));
        let ce = cross_entropy_logits(&logits, &[2; 18], 255).unwrap();
        assert!((ce.loss - 6f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 1.79176).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_peaked_goes_to_zero() {
        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        logits.data_mut()[1] = 50.0;
        let ce = cross_entropy_logits(&logits, &[1], 255).unwrap();
        assert!(ce.loss < 1e-20);
    }

    #[test]
    fn cross_entropy_all_ignored_and_bad_labels() {
        let logits = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 2));
        let ce = cross_entropy_logits(&logits, &[255, 255], 255).unwrap();
        assert!(ce.all_ignored && ce.loss == 0.0);
        assert!(matches!(cross_entropy_logits(&logits, &[0, 3], 255), Err(crate::Error::Data(_))));
        assert!(matches!(cross_entropy_logits(&logits, &[0, -1], 255), Err(crate::Error::Data(_))));
    }

    #[test]
    fn cwd_two_pixel_example() {
        let t = Tensor::<f64>::from_f64s(Shape::new(1, 1, 1, 2), &[4.0, 0.0]).unwrap();
        let s = Tensor::<f64>::from_f64s(Shape::new(1, 1, 1, 2), &[0.0, 4.0]).unwrap();
        let (loss, _) = cwd_loss(&s, &t, 4.0).unwrap();
        // Independent oracle: direct exponentials.
        let e = std::f64::consts::E;
        let (pt0, pt1) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let kl = pt0 * (pt0 / pt1).ln() + pt1 * (pt1 / pt0).ln();
        assert!((loss - 16.0 * kl).abs() < 1e-12);
        assert!((loss - 7.3939).abs() < 1e-3);
    }

    #[test]
    fn cwd_identity_is_zero() {
        let mut rng = Rng::new(11);
        let x: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 3, 4, 4), -3.0, 3.0);
        let (loss, grad) = cwd_loss(&x, &x, 4.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.max_abs() < 1e-15);
    }

    #[test]
    fn l2_and_kl_examples() {
        let a = Tensor::<f64>::from_f64s(Shape::new(1, 1, 1, 2), &[0.0, 2.0]).unwrap();
        let b = Tensor::<f64>::zeros(a.shape());
        assert_eq!(l2_loss(&a, &b).unwrap().0, 2.0);
        assert_eq!(l2_loss(&a, &a).unwrap().0, 0.0);
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let s: Tensor<f64> = rng.uniform_tensor(Shape::new(1, 4, 3, 3), -2.0, 2.0);
            let t: Tensor<f64> = rng.uniform_tensor(Shape::new(1, 4, 3, 3), -2.0, 2.0);
            assert!(kl_loss(&s, &t, 4.0).unwrap().0 >= 0.0);
            assert!(kl_loss(&s, &s, 4.0).unwrap().0.abs() < 1e-12);
        }
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        assert!(cwd_loss(&a, &b, 4.0).is_err());
        assert!(kl_loss(&a, &b, 4.0).is_err());
        assert!(l2_loss(&a, &b).is_err());
    }
}
