//! Named parameters, initialization, and binding into a graph.

use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{bail, Result};
use crate::ops::{BnMode, Conv2dGeom, RunningStats};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Ordered, uniquely named set of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            bail!(Config, "duplicate parameter name {name:?}");
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad, trainable: kind == ParamKind::Weight, kind });
        Ok(self.params.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        match self.get(name) {
            Some(p) => Ok(&p.value),
            None => bail!(Config, "missing parameter {name:?}"),
        }
    }

    pub fn at(&self, i: usize) -> &Parameter<S> {
        &self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn count_weights(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.numel()).sum()
    }

    /// Marks every weight as non-trainable.
    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<S>) -> Result<()> {
        for p in other.params {
            let trainable = p.trainable;
            let i = self.insert(p.name, p.value, p.kind)?;
            self.params[i].trainable = trainable;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`, as a new store.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            let i = out.insert(p.name.clone(), p.value.clone(), p.kind).expect("names unique");
            out.params[i].trainable = p.trainable;
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let i = out.insert(p.name.clone(), p.value.cast(), p.kind).expect("names unique");
            out.params[i].trainable = p.trainable;
        }
        out
    }

    // ---- initialization ----------------------------------------------------

    /// Convolution weight `[co, ci, kh, kw]`, Kaiming-uniform over fan-in,
    /// plus an optional zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn add_conv(&mut self, rng: &mut Rng, prefix: &str, co: usize, ci: usize, kh: usize, kw: usize, bias: bool) -> Result<()> {
        let fan_in = (ci * kh * kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        self.insert(format!("{prefix}.weight"), rng.uniform_tensor(Shape::new(co, ci, kh, kw), -bound, bound), ParamKind::Weight)?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(co)), ParamKind::Weight)?;
        }
        Ok(())
    }

    /// Kernel tensor with Kaiming-normal initialization over fan-in.
    pub fn add_kernel_normal(&mut self, rng: &mut Rng, name: &str, shape: Shape) -> Result<()> {
        let fan_in = (shape.c() * shape.h() * shape.w()) as f64;
        self.insert(name, rng.normal_tensor(shape, (2.0 / fan_in).sqrt()), ParamKind::Weight)?;
        Ok(())
    }

    /// Batch norm: gamma = 1, beta = 0, running mean 0 / variance 1.
    pub fn add_bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.weight"), Tensor::full(Shape::vector(c), S::one()), ParamKind::Weight)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(c)), ParamKind::Weight)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(Shape::vector(c)), ParamKind::Buffer)?;
        self.insert(format!("{prefix}.running_var"), Tensor::full(Shape::vector(c), S::one()), ParamKind::Buffer)?;
        Ok(())
    }
}

/// Whether a parameter name denotes a batch-norm running statistic.
pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Binds a [`ParamStore`] into a [`Graph`] on demand and implements the
/// common layers in terms of named parameters.
pub struct Binder<'p, S: Scalar> {
    store: &'p mut ParamStore<S>,
    vars: Vec<Option<Var>>,
    mode: BnMode,
}

impl<'p, S: Scalar> Binder<'p, S> {
    pub fn new(store: &'p mut ParamStore<S>, mode: BnMode) -> Self {
        let n = store.len();
        Binder { store, vars: vec![None; n], mode }
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Graph leaf for `name`, created on first use. Trainable weights
    /// require gradients.
    pub fn get(&mut self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        let Some(i) = self.store.position(name) else {
            bail!(Config, "missing parameter {name:?}");
        };
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let p = self.store.at(i);
        let v = g.leaf(p.value.clone(), p.trainable && p.kind == ParamKind::Weight);
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    /// Writes the gradients of every bound trainable weight into the store
    /// (zero for weights that were bound but received no gradient).
    pub fn collect_grads(&mut self, grads: &Gradients<S>) {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            let p = &mut self.store.params[i];
            if !(p.trainable && p.kind == ParamKind::Weight) {
                continue;
            }
            match grads.get(*v) {
                Some(t) => p.grad = t.clone(),
                None => p.grad.data_mut().iter_mut().for_each(|x| *x = S::zero()),
            }
        }
    }

    /// Variables of all bound parameters, by name.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (self.store.at(i).name.clone(), v)))
            .collect()
    }

    pub fn conv(&mut self, g: &mut Graph<S>, prefix: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let w = self.get(g, &format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.has(&bias_name) { Some(self.get(g, &bias_name)?) } else { None };
        g.conv2d(x, w, b, geom)
    }

    /// Batch norm; train mode updates the stored running statistics.
    pub fn bn(&mut self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.get(g, &format!("{prefix}.weight"))?;
        let beta = self.get(g, &format!("{prefix}.bias"))?;
        let (mi, vi) = match (
            self.store.position(&format!("{prefix}.running_mean")),
            self.store.position(&format!("{prefix}.running_var")),
        ) {
            (Some(m), Some(v)) => (m, v),
            _ => bail!(State, "batch norm {prefix:?} has no running statistics"),
        };
        let mut rs = RunningStats {
            mean: self.store.params[mi].value.data().to_vec(),
            var: self.store.params[vi].value.data().to_vec(),
        };
        let y = g.batchnorm2d(x, gamma, beta, Some(&mut rs), S::from_f64(BN_MOMENTUM), S::from_f64(BN_EPS), self.mode)?;
        if self.mode == BnMode::Train {
            self.store.params[mi].value.data_mut().copy_from_slice(&rs.mean);
            self.store.params[vi].value.data_mut().copy_from_slice(&rs.var);
        }
        Ok(y)
    }

    pub fn conv_bn(&mut self, g: &mut Graph<S>, prefix: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let y = self.conv(g, &format!("{prefix}.conv"), x, geom)?;
        self.bn(g, &format!("{prefix}.bn"), y)
    }

    pub fn conv_bn_relu(&mut self, g: &mut Graph<S>, prefix: &str, x: Var, geom: Conv2dGeom) -> Result<Var> {
        let y = self.conv_bn(g, prefix, x, geom)?;
        g.relu(y)
    }
}

/// Registers the parameters used by [`Binder::conv_bn`].
pub fn add_conv_bn<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, co: usize, ci: usize, k: usize) -> Result<()> {
    store.add_conv(rng, &format!("{prefix}.conv"), co, ci, k, k, false)?;
    store.add_bn(&format!("{prefix}.bn"), co)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_bn("bn", 4).unwrap();
        assert!(s.add_bn("bn", 4).is_err());
    }

    #[test]
    fn count_excludes_buffers() {
        let mut s = ParamStore::<f32>::new();
        assert_eq!(s.count_weights(), 0);
        s.add_conv(&mut Rng::new(0), "c", 8, 3, 3, 3, true).unwrap();
        assert_eq!(s.count_weights(), 3 * 8 * 9 + 8);
        s.add_bn("bn", 8).unwrap();
        assert_eq!(s.count_weights(), 224 + 16);
    }

    #[test]
    fn init_is_deterministic() {
        let build = || {
            let mut s = ParamStore::<f32>::new();
            s.add_conv(&mut Rng::new(5), "c", 4, 4, 3, 3, false).unwrap();
            s
        };
        assert_eq!(build().value("c.weight").unwrap(), build().value("c.weight").unwrap());
    }

    #[test]
    fn binder_updates_running_stats_in_train_mode_only() {
        let mut s = ParamStore::<f64>::new();
        s.add_bn("bn", 1).unwrap();
        let x = Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[1.0, 3.0]).unwrap();
        {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut s, BnMode::Eval);
            let xv = g.input(x.clone());
            b.bn(&mut g, "bn", xv).unwrap();
        }
        assert_eq!(s.value("bn.running_mean").unwrap().data(), &[0.0]);
        {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut s, BnMode::Train);
            let xv = g.input(x);
            b.bn(&mut g, "bn", xv).unwrap();
        }
        assert!((s.value("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
    }
}
