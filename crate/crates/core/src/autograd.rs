//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs do not require gradients carry no backward closure, so frozen
//! sub-networks (and whole graphs built with [`Graph::no_grad`]) cost only
//! their forward pass.

use crate::error::{bail, Result};
use crate::ops::{
    self, attention, conv, loss, norm, pool, BnMode, Conv2dGeom, CrossEntropy, PoolGeom, RunningStats,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward closure.
pub struct BackwardCtx<'a, S: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<S>,
    pub output: &'a Tensor<S>,
    pub inputs: Vec<&'a Tensor<S>>,
    /// Whether each input wants a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn scalar_shape() -> Shape {
    Shape::scalar()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records backward closures.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn into_value(mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(Shape::default()))
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    /// Constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// Records an operation with a caller-supplied backward closure.
    /// `make_backward` is only invoked when some parent requires gradients.
    pub fn custom<F>(&mut self, name: &str, parents: &[Var], value: Tensor<S>, make_backward: F) -> Result<Var>
    where
        F: FnOnce() -> BackwardFn<S>,
    {
        value.ensure_finite(name)?;
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(make_backward()) } else { None };
        self.nodes.push(Node { value, parents: parents.to_vec(), backward, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse accumulation from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p.0].value.shape() {
                    bail!(Dimension, "backward of node {i}: gradient {} for input {}", g.shape(), self.nodes[p.0].value.shape());
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.custom("add", &[a, b], v, || Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.custom("sub", &[a, b], v, || Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.custom("mul", &[a, b], v, || {
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y).expect("same shape")),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x).expect("same shape")),
                ]
            })
        })
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.custom("scale", &[a], v, || Box::new(move |c| vec![Some(c.grad.map(|g| g * k))]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = ops::relu(self.value(x));
        self.custom("relu", &[x], v, || Box::new(|c| vec![Some(ops::relu_backward(c.inputs[0], c.grad))]))
    }

    /// Sum of all elements, as a `[1,1,1,1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.custom("sum", &[x], v, || Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_f64(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, S::one() / n)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(S, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w)?;
            acc = Some(match acc {
                Some(a) => self.add(a, t)?,
                None => t,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => Ok(self.input(Tensor::zeros(scalar_shape()))),
        }
    }

    // ---- layers ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let (out, saved) = conv::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.custom("conv2d", &parents, out, move || {
            Box::new(move |c| {
                let need_b = c.needs.get(2).copied().unwrap_or(false);
                let (dx, dw, db) = conv::conv2d_backward(&saved, c.inputs[1], c.grad, geom, (c.needs[0], c.needs[1], need_b));
                let mut v = vec![dx, dw];
                if c.inputs.len() == 3 {
                    v.push(db);
                }
                v
            })
        })
    }

    /// Batch normalization. In train mode `running` (when given) is updated
    /// in place; eval mode requires it.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&mut RunningStats<S>>,
        momentum: S,
        eps: S,
        mode: BnMode,
    ) -> Result<Var> {
        let (out, saved) = norm::batchnorm2d(self.value(x), self.value(gamma), self.value(beta), running, momentum, eps, mode)?;
        self.custom("batchnorm2d", &[x, gamma, beta], out, move || {
            Box::new(move |c| {
                let (dx, dg, db) = norm::batchnorm2d_backward(&saved, c.inputs[1], c.grad);
                let shape = c.inputs[1].shape();
                let r = |t: Tensor<S>| t.reshape(shape).expect("per-channel");
                vec![Some(dx), Some(r(dg)), Some(r(db))]
            })
        })
    }

    pub fn softmax_spatial(&mut self, x: Var, temperature: S) -> Result<Var> {
        let out = norm::softmax_spatial(self.value(x), temperature)?;
        self.custom("softmax_spatial", &[x], out, move || {
            Box::new(move |c| vec![Some(norm::softmax_spatial_backward(c.output, c.grad, temperature))])
        })
    }

    pub fn group_l2_normalize(&mut self, x: Var, groups: usize, eps: S) -> Result<Var> {
        let out = norm::group_l2_normalize(self.value(x), groups, eps)?;
        self.custom("group_l2_normalize", &[x], out, move || {
            Box::new(move |c| vec![Some(norm::group_l2_normalize_backward(c.inputs[0], c.grad, groups, eps))])
        })
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h() == out_h && s.w() == out_w {
            return Ok(x);
        }
        let out = pool::bilinear_resize(self.value(x), out_h, out_w)?;
        self.custom("bilinear_resize", &[x], out, move || {
            Box::new(move |c| vec![Some(pool::bilinear_resize_backward(c.inputs[0].shape(), c.grad))])
        })
    }

    pub fn avg_pool2d(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let out = pool::avg_pool2d(self.value(x), geom)?;
        self.custom("avg_pool2d", &[x], out, move || {
            Box::new(move |c| vec![Some(pool::avg_pool2d_backward(c.inputs[0].shape(), c.grad, geom))])
        })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        self.custom("global_avg_pool", &[x], out, || {
            Box::new(|c| vec![Some(pool::global_avg_pool_backward(c.inputs[0].shape(), c.grad))])
        })
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        let widths: Vec<usize> = vals.iter().map(|t| t.shape().c()).collect();
        self.custom("concat_channels", xs, out, move || {
            Box::new(move |c| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(&c.needs)
                    .map(|(&w, &need)| {
                        let g = need.then(|| ops::slice_channels(c.grad, start, w).expect("in range"));
                        start += w;
                        g
                    })
                    .collect()
            })
        })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        self.custom("slice_channels", &[x], out, move || {
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                ops::add_into_channels(&mut g, c.grad, start);
                vec![Some(g)]
            })
        })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, saved) = attention::multi_head_attention(self.value(q), self.value(k), self.value(v), heads)?;
        self.custom("attention", &[q, k, v], out, move || {
            Box::new(move |c| {
                let (dq, dk, dv) =
                    attention::multi_head_attention_backward(&saved, c.inputs[0], c.inputs[1], c.inputs[2], c.grad, heads);
                vec![Some(dq), Some(dk), Some(dv)]
            })
        })
    }

    // ---- losses ------------------------------------------------------------
    // Targets are constants: no gradient flows into them.

    pub fn cross_entropy(&mut self, logits: Var, labels: &[i32], ignore_index: i32) -> Result<(Var, CrossEntropy<S>)> {
        let ce = loss::cross_entropy_logits(self.value(logits), labels, ignore_index)?;
        let grad = ce.grad.clone();
        let v = self.loss_node("cross_entropy", logits, None, ce.loss, grad)?;
        Ok((v, ce))
    }

    pub fn cwd_loss(&mut self, student: Var, teacher: Var, temperature: S) -> Result<Var> {
        let (l, g) = loss::cwd_loss(self.value(student), self.value(teacher), temperature)?;
        self.loss_node("cwd_loss", student, Some(teacher), l, g)
    }

    pub fn kl_loss(&mut self, student: Var, teacher: Var, temperature: S) -> Result<Var> {
        let (l, g) = loss::kl_loss(self.value(student), self.value(teacher), temperature)?;
        self.loss_node("kl_loss", student, Some(teacher), l, g)
    }

    pub fn l2_loss(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (l, g) = loss::l2_loss(self.value(student), self.value(teacher))?;
        self.loss_node("l2_loss", student, Some(teacher), l, g)
    }

    fn loss_node(&mut self, name: &str, student: Var, target: Option<Var>, value: S, grad: Tensor<S>) -> Result<Var> {
        let mut parents = vec![student];
        parents.extend(target);
        self.custom(name, &parents, Tensor::scalar(value), move || {
            Box::new(move |c| {
                let k = c.grad.data()[0];
                let mut v = vec![Some(grad.map(|x| x * k))];
                if c.inputs.len() == 2 {
                    v.push(None);
                }
                v
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_node() {
        // f = sum((a + a) * b)  =>  df/da = 2b, df/db = 2a
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[3.0, 5.0]).unwrap(), true);
        let s = g.add(a, a).unwrap();
        let p = g.mul(s, b).unwrap();
        let f = g.sum(p).unwrap();
        assert_eq!(g.scalar(f), 26.0);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.0, 10.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_and_no_grad_graphs_record_nothing() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let y = g.relu(x).unwrap();
        assert!(!g.requires_grad(y));
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());

        let mut g = Graph::<f32>::no_grad();
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), true);
        assert!(!g.requires_grad(w));
    }

    #[test]
    fn loss_targets_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[0.0, 1.0]).unwrap(), true);
        let t = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[1.0, 0.0]).unwrap(), true);
        let l = g.cwd_loss(s, t, 4.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(s).is_some());
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(Shape::scalar(), f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
    }
}
