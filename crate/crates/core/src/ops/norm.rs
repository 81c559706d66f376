//! Batch normalization, spatial softmax and grouped L2 normalization.

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Running mean and (unbiased) variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(c: usize) -> Self {
        RunningStats { mean: vec![S::zero(); c], var: vec![S::one(); c] }
    }
}

/// Values kept for the backward pass.
pub struct BnSaved<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    mode: BnMode,
}

/// Batch normalization over (N, H, W) per channel.
///
/// `running` is required in eval mode and updated in train mode by an
/// exponential moving average with the given momentum.
pub fn batchnorm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: Option<&mut RunningStats<S>>,
    momentum: S,
    eps: S,
    mode: BnMode,
) -> Result<(Tensor<S>, BnSaved<S>)> {
    let s = x.shape();
    let c = s.c();
    if gamma.numel() != c || beta.numel() != c {
        bail!(Dimension, "batchnorm2d: {c} channels but gamma {} / beta {}", gamma.shape(), beta.shape());
    }
    let count = s.n() * s.hw();
    let (mean, var): (Vec<S>, Vec<S>) = match mode {
        BnMode::Train => {
            if count < 2 {
                bail!(Geometry, "batchnorm2d in train mode needs at least 2 values per channel, got {count}");
            }
            let cnt = S::from_f64(count as f64);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut acc = S::zero();
                for n in 0..s.n() {
                    acc = x.plane(n, ch).iter().fold(acc, |a, &v| a + v);
                }
                let m = acc / cnt;
                let mut sq = S::zero();
                for n in 0..s.n() {
                    sq = x.plane(n, ch).iter().fold(sq, |a, &v| a + (v - m) * (v - m));
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
            if let Some(rs) = running {
                if rs.mean.len() != c || rs.var.len() != c {
                    bail!(State, "batchnorm2d: running stats sized {} for {c} channels", rs.mean.len());
                }
                let unbias = cnt / (cnt - S::one());
                for ch in 0..c {
                    rs.mean[ch] = (S::one() - momentum) * rs.mean[ch] + momentum * mean[ch];
                    rs.var[ch] = (S::one() - momentum) * rs.var[ch] + momentum * var[ch] * unbias;
                }
            }
            (mean, var)
        }
        BnMode::Eval => {
            let Some(rs) = running else {
                bail!(State, "batchnorm2d in eval mode without running statistics");
            };
            if rs.mean.len() != c || rs.var.len() != c {
                bail!(State, "batchnorm2d: running stats sized {} for {c} channels", rs.mean.len());
            }
            (rs.mean.clone(), rs.var.clone())
        }
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(s);
    let mut xhat = vec![S::zero(); s.numel()];
    let hw = s.hw();
    for n in 0..s.n() {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            let src = &x.data()[off..off + hw];
            for i in 0..hw {
                let xh = (src[i] - m) * is;
                xhat[off + i] = xh;
                y.data_mut()[off + i] = g * xh + b;
            }
        }
    }
    Ok((y, BnSaved { xhat, inv_std, mode }))
}

/// Gradients of `batchnorm2d` with respect to (x, gamma, beta).
pub fn batchnorm2d_backward<S: Scalar>(
    saved: &BnSaved<S>,
    gamma: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let s = dy.shape();
    let (c, hw) = (s.c(), s.hw());
    let cnt = S::from_f64((s.n() * hw) as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for n in 0..s.n() {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                let g = dy.data()[i];
                dbeta[ch] += g;
                dgamma[ch] += g * saved.xhat[i];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n() {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            for i in off..off + hw {
                let g = dy.data()[i];
                dx.data_mut()[i] = match saved.mode {
                    BnMode::Eval => scale * g,
                    BnMode::Train => {
                        scale * (g - dbeta[ch] / cnt - saved.xhat[i] * dgamma[ch] / cnt)
                    }
                };
            }
        }
    }
    let v = |d: Vec<S>| Tensor::from_vec(Shape::vector(c), d).expect("c values");
    (dx, v(dgamma), v(dbeta))
}

/// Softmax over the `H*W` positions of every (n, c) plane, with temperature.
pub fn softmax_spatial<S: Scalar>(x: &Tensor<S>, temperature: S) -> Result<Tensor<S>> {
    if !(temperature > S::zero()) {
        bail!(Config, "softmax temperature must be positive, got {temperature:?}");
    }
    let s = x.shape();
    let hw = s.hw();
    if hw == 0 {
        bail!(Geometry, "softmax_spatial over an empty plane");
    }
    let mut y = Tensor::zeros(s);
    for (src, dst) in x.data().chunks(hw).zip(y.data_mut().chunks_mut(hw)) {
        softmax_into(src, temperature, dst);
    }
    Ok(y)
}

pub(crate) fn softmax_into<S: Scalar>(src: &[S], t: S, dst: &mut [S]) {
    let m = src.iter().fold(S::neg_infinity(), |a, &v| a.max(v / t));
    let mut z = S::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v / t - m).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

/// Backward of `softmax_spatial` given its output `y`.
pub fn softmax_spatial_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>, temperature: S) -> Tensor<S> {
    let hw = y.shape().hw();
    let mut dx = Tensor::zeros(y.shape());
    for ((yp, gp), dp) in y.data().chunks(hw).zip(dy.data().chunks(hw)).zip(dx.data_mut().chunks_mut(hw)) {
        let dot = yp.iter().zip(gp).fold(S::zero(), |a, (&p, &g)| a + p * g);
        for i in 0..hw {
            dp[i] = yp[i] * (gp[i] - dot) / temperature;
        }
    }
    dx
}

/// Splits channels into `groups` contiguous blocks and divides every
/// per-pixel block vector by its L2 norm plus `eps`.
pub fn group_l2_normalize<S: Scalar>(x: &Tensor<S>, groups: usize, eps: S) -> Result<Tensor<S>> {
    let s = x.shape();
    check_groups(s.c(), groups)?;
    let norms = block_norms(x, groups);
    let (gs, hw) = (s.c() / groups, s.hw());
    let mut y = x.clone();
    for n in 0..s.n() {
        for g in 0..groups {
            let nb = &norms[(n * groups + g) * hw..][..hw];
            for ch in g * gs..(g + 1) * gs {
                let off = (n * s.c() + ch) * hw;
                for (v, &nv) in y.data_mut()[off..off + hw].iter_mut().zip(nb) {
                    *v /= nv + eps;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn check_groups(c: usize, groups: usize) -> Result<()> {
    if groups == 0 || c % groups != 0 {
        bail!(Config, "{c} channels not divisible into {groups} groups");
    }
    Ok(())
}

/// L2 norms indexed by (n, group, pixel).
fn block_norms<S: Scalar>(x: &Tensor<S>, groups: usize) -> Vec<S> {
    let s = x.shape();
    let (gs, hw) = (s.c() / groups, s.hw());
    let mut sq = vec![S::zero(); s.n() * groups * hw];
    for n in 0..s.n() {
        for g in 0..groups {
            let acc = &mut sq[(n * groups + g) * hw..][..hw];
            for ch in g * gs..(g + 1) * gs {
                for (a, &v) in acc.iter_mut().zip(x.plane(n, ch)) {
                    *a += v * v;
                }
            }
        }
    }
    sq.iter_mut().for_each(|v| *v = v.sqrt());
    sq
}

pub fn group_l2_normalize_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, groups: usize, eps: S) -> Tensor<S> {
    let s = x.shape();
    let (gs, hw) = (s.c() / groups, s.hw());
    let norms = block_norms(x, groups);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n() {
        for g in 0..groups {
            let nb = &norms[(n * groups + g) * hw..][..hw];
            // <dy, x> per pixel over the block.
            let mut dot = vec![S::zero(); hw];
            for ch in g * gs..(g + 1) * gs {
                for ((d, &xv), &gv) in dot.iter_mut().zip(x.plane(n, ch)).zip(dy.plane(n, ch)) {
                    *d += xv * gv;
                }
            }
            for ch in g * gs..(g + 1) * gs {
                let off = (n * s.c() + ch) * hw;
                for i in 0..hw {
                    let nv = nb[i];
                    let denom = nv + eps;
                    let gv = dy.data()[off + i];
                    let mut v = gv / denom;
                    if nv > S::zero() {
                        v -= x.data()[off + i] * dot[i] / (denom * denom * nv);
                    }
                    dx.data_mut()[off + i] = v;
                }
            }
        }
    }
    dx
}
