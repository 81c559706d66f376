//! Toy hierarchical attention network used as the training-only semantic
//! branch. Each stage is a strided patch embedding followed by attention and
//! MLP blocks; channel batch norm stands in for token layer norm.

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::model::check_input_geometry;
use crate::ops::{BnMode, Conv2dGeom};
use crate::param::{Binder, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherConfig {
    pub embed_dims: [usize; 4],
    pub heads: [usize; 4],
    pub blocks: [usize; 4],
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Decoder embedding width `C_emb`.
    pub decoder_embed: usize,
}

impl TeacherConfig {
    pub fn toy(num_classes: usize) -> Self {
        TeacherConfig {
            embed_dims: [16, 32, 64, 128],
            heads: [2; 4],
            blocks: [1; 4],
            mlp_ratio: 2,
            num_classes,
            decoder_embed: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (e, h) = (self.embed_dims[i], self.heads[i]);
            if e == 0 || h == 0 || e % h != 0 {
                bail!(Config, "teacher stage {}: embed dim {e} not divisible by {h} heads", i + 1);
            }
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 || self.decoder_embed == 0 {
            bail!(Config, "teacher mlp_ratio, num_classes and decoder_embed must be positive");
        }
        Ok(())
    }

    fn embed_geom(stage: usize) -> (usize, Conv2dGeom) {
        if stage == 0 {
            (7, Conv2dGeom::new((4, 4), (3, 3)))
        } else {
            (3, Conv2dGeom::new((2, 2), (1, 1)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOutputs<T> {
    pub t1: T,
    pub t2: T,
    pub t3: T,
    pub t4: T,
    /// Concatenated stage projections at stride 4, input of the fuse conv.
    pub pre_fusion: T,
    pub fused: T,
    pub logits: T,
}

impl<T> TeacherOutputs<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> TeacherOutputs<U> {
        TeacherOutputs {
            t1: f(self.t1),
            t2: f(self.t2),
            t3: f(self.t3),
            t4: f(self.t4),
            pre_fusion: f(self.pre_fusion),
            fused: f(self.fused),
            logits: f(self.logits),
        }
    }

    pub fn stage(&self, i: usize) -> &T {
        [&self.t1, &self.t2, &self.t3, &self.t4][i]
    }
}

pub fn build_teacher<S: Scalar>(cfg: &TeacherConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let root = Rng::new(seed).fork("teacher");
    let mut store = ParamStore::new();
    let mut cin = 3;
    for stage in 0..4 {
        let mut rng = root.fork(&format!("stage{}", stage + 1));
        let e = cfg.embed_dims[stage];
        let (k, _) = TeacherConfig::embed_geom(stage);
        let p = format!("teacher.stage{}", stage + 1);
        store.add_conv(&mut rng, &format!("{p}.embed.conv"), e, cin, k, k, false)?;
        store.add_bn(&format!("{p}.embed.bn"), e)?;
        for blk in 0..cfg.blocks[stage] {
            let p = format!("{p}.block{blk}");
            for proj in ["q", "k", "v", "o"] {
                store.add_conv(&mut rng, &format!("{p}.attn.{proj}"), e, e, 1, 1, false)?;
            }
            store.add_bn(&format!("{p}.norm1"), e)?;
            store.add_conv(&mut rng, &format!("{p}.mlp.fc1"), e * cfg.mlp_ratio, e, 1, 1, true)?;
            store.add_conv(&mut rng, &format!("{p}.mlp.fc2"), e, e * cfg.mlp_ratio, 1, 1, true)?;
            store.add_bn(&format!("{p}.norm2"), e)?;
        }
        cin = e;
    }
    let mut rng = root.fork("decoder");
    let ce = cfg.decoder_embed;
    for (i, &e) in cfg.embed_dims.iter().enumerate() {
        store.add_conv(&mut rng, &format!("teacher.decoder.proj{}", i + 1), ce, e, 1, 1, true)?;
    }
    store.add_conv(&mut rng, "teacher.decoder.fuse", ce, 4 * ce, 1, 1, true)?;
    store.add_conv(&mut rng, "teacher.decoder.cls", cfg.num_classes, ce, 1, 1, true)?;
    Ok(store)
}

/// Strided convolution + BN.
pub fn patch_embed<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, stage: usize, x: Var) -> Result<Var> {
    let (_, geom) = TeacherConfig::embed_geom(stage);
    let p = format!("teacher.stage{}.embed", stage + 1);
    let y = b.conv(g, &format!("{p}.conv"), x, geom)?;
    b.bn(g, &format!("{p}.bn"), y)
}

/// Multi-head self-attention over all `h*w` tokens with 1x1 q/k/v/output
/// projections.
pub fn self_attention<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let unit = Conv2dGeom::unit();
    let q = b.conv(g, &format!("{prefix}.q"), x, unit)?;
    let k = b.conv(g, &format!("{prefix}.k"), x, unit)?;
    let v = b.conv(g, &format!("{prefix}.v"), x, unit)?;
    let a = g.attention(q, k, v, heads)?;
    b.conv(g, &format!("{prefix}.o"), a, unit)
}

fn block<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let unit = Conv2dGeom::unit();
    let a = self_attention(g, b, &format!("{prefix}.attn"), x, heads)?;
    let x = g.add(x, a)?;
    let x = b.bn(g, &format!("{prefix}.norm1"), x)?;
    let h = b.conv(g, &format!("{prefix}.mlp.fc1"), x, unit)?;
    let h = g.relu(h)?;
    let h = b.conv(g, &format!("{prefix}.mlp.fc2"), h, unit)?;
    let x = g.add(x, h)?;
    b.bn(g, &format!("{prefix}.norm2"), x)
}

/// Fuse conv and classifier applied to an externally supplied
/// `4 * C_emb`-channel feature. Logits stay at the feature resolution.
pub fn teacher_decode_external<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &TeacherConfig, feat: Var) -> Result<(Var, Var)> {
    let c = g.shape(feat).c();
    if c != 4 * cfg.decoder_embed {
        bail!(Dimension, "teacher decoder expects {} channels, got {c}", 4 * cfg.decoder_embed);
    }
    let unit = Conv2dGeom::unit();
    let fused = b.conv(g, "teacher.decoder.fuse", feat, unit)?;
    let h = g.relu(fused)?;
    let logits = b.conv(g, "teacher.decoder.cls", h, unit)?;
    Ok((fused, logits))
}

pub fn teacher_forward<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &TeacherConfig, x: Var) -> Result<TeacherOutputs<Var>> {
    let s = g.shape(x);
    check_input_geometry(s.h(), s.w())?;
    let mut h = x;
    let mut stages = Vec::with_capacity(4);
    for stage in 0..4 {
        h = patch_embed(g, b, stage, h)?;
        for blk in 0..cfg.blocks[stage] {
            h = block(g, b, &format!("teacher.stage{}.block{blk}", stage + 1), h, cfg.heads[stage])?;
        }
        stages.push(h);
    }
    let s1 = g.shape(stages[0]);
    let mut projected = Vec::with_capacity(4);
    for (i, &t) in stages.iter().enumerate() {
        let p = b.conv(g, &format!("teacher.decoder.proj{}", i + 1), t, Conv2dGeom::unit())?;
        projected.push(g.bilinear_resize(p, s1.h(), s1.w())?);
    }
    let pre_fusion = g.concat_channels(&projected)?;
    let (fused, z) = teacher_decode_external(g, b, cfg, pre_fusion)?;
    let logits = g.bilinear_resize(z, s.h(), s.w())?;
    Ok(TeacherOutputs { t1: stages[0], t2: stages[1], t3: stages[2], t4: stages[3], pre_fusion, fused, logits })
}

/// Eval-mode forward without a tape.
pub fn teacher_infer<S: Scalar>(cfg: &TeacherConfig, params: &mut ParamStore<S>, x: &Tensor<S>) -> Result<TeacherOutputs<Tensor<S>>> {
    let mut g = Graph::no_grad();
    let mut b = Binder::new(params, BnMode::Eval);
    let xv = g.input(x.clone());
    let out = teacher_forward(&mut g, &mut b, cfg, xv)?;
    Ok(out.map(|v| g.value(v).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn output_shapes_64() {
        let cfg = TeacherConfig::toy(6);
        let mut p = build_teacher::<f32>(&cfg, 0).unwrap();
        let x = Rng::new(1).uniform_tensor(Shape::new(2, 3, 64, 64), 0.0, 1.0);
        let o = teacher_infer(&cfg, &mut p, &x).unwrap();
        assert_eq!(o.t1.shape(), Shape::new(2, 16, 16, 16));
        assert_eq!(o.t2.shape(), Shape::new(2, 32, 8, 8));
        assert_eq!(o.t3.shape(), Shape::new(2, 64, 4, 4));
        assert_eq!(o.t4.shape(), Shape::new(2, 128, 2, 2));
        assert_eq!(o.fused.shape(), Shape::new(2, 32, 16, 16));
        assert_eq!(o.logits.shape(), Shape::new(2, 6, 64, 64));
        let again = teacher_infer(&cfg, &mut p, &x).unwrap();
        assert_eq!(o.logits, again.logits);
    }

    #[test]
    fn decode_external_reproduces_own_decoder() {
        let cfg = TeacherConfig::toy(6);
        let mut p = build_teacher::<f32>(&cfg, 3).unwrap();
        let x = Rng::new(1).uniform_tensor(Shape::new(1, 3, 32, 32), 0.0, 1.0);
        let o = teacher_infer(&cfg, &mut p, &x).unwrap();
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&mut p, BnMode::Eval);
        let f = g.input(o.pre_fusion.clone());
        let (fused, z) = teacher_decode_external(&mut g, &mut b, &cfg, f).unwrap();
        assert_eq!(g.value(fused), &o.fused);
        let up = crate::ops::bilinear_resize(g.value(z), 32, 32).unwrap();
        assert_eq!(up, o.logits);
    }

    #[test]
    fn decode_external_zero_input_gives_biases() {
        let cfg = TeacherConfig::toy(3);
        let mut p = build_teacher::<f64>(&cfg, 0).unwrap();
        p.get_mut("teacher.decoder.fuse.bias").unwrap().value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 10.0);
        p.get_mut("teacher.decoder.cls.bias").unwrap().value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&mut p, BnMode::Eval);
        let f = g.input(Tensor::zeros(Shape::new(1, 128, 2, 2)));
        let (fused, z) = teacher_decode_external(&mut g, &mut b, &cfg, f).unwrap();
        assert_eq!(g.value(fused).at(0, 3, 1, 1), -7.0);
        // relu(fused bias) feeds the classifier, so logits = W_cls . relu(b_fuse) + b_cls
        let w = b.store().value("teacher.decoder.cls.weight").unwrap().clone();
        let relu_b: Vec<f64> = (0..32).map(|i| (i as f64 - 10.0).max(0.0)).collect();
        for k in 0..3 {
            let want: f64 = (0..32).map(|j| w.data()[k * 32 + j] * relu_b[j]).sum::<f64>() + [0.5, -1.0, 2.0][k];
            assert!((g.value(z).at(0, k, 0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_external_rejects_wrong_width() {
        let cfg = TeacherConfig::toy(3);
        let mut p = build_teacher::<f32>(&cfg, 0).unwrap();
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&mut p, BnMode::Eval);
        let f = g.input(Tensor::zeros(Shape::new(1, 64, 2, 2)));
        assert!(teacher_decode_external(&mut g, &mut b, &cfg, f).is_err());
    }

    #[test]
    fn frozen_decoder_passes_gradient_to_input_only() {
        let cfg = TeacherConfig::toy(3);
        let mut p = build_teacher::<f64>(&cfg, 0).unwrap();
        p.freeze();
        let mut g = Graph::new();
        let mut b = Binder::new(&mut p, BnMode::Eval);
        let f = g.leaf(Rng::new(2).normal_tensor(Shape::new(1, 128, 4, 4), 1.0), true);
        let (fused, z) = teacher_decode_external(&mut g, &mut b, &cfg, f).unwrap();
        let (l1, l2) = (g.sum(fused).unwrap(), g.sum(z).unwrap());
        let l = g.add(l1, l2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(f).unwrap().max_abs() > 0.0);
        for (_, v) in b.bound() {
            assert!(grads.get(v).is_none());
        }
        b.collect_grads(&grads);
        assert!(p.iter().all(|q| q.grad.max_abs() == 0.0));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        for n in ["q", "k", "v", "o"] {
            store.add_conv(&mut rng, &format!("a.{n}"), 4, 4, 1, 1, false).unwrap();
        }
        let x = rng.normal_tensor(Shape::new(1, 4, 1, 1), 1.0);
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&mut store, BnMode::Eval);
        let xv = g.input(x.clone());
        let y = self_attention(&mut g, &mut b, "a", xv, 2).unwrap();
        let (wv, wo) = (b.store().value("a.v.weight").unwrap(), b.store().value("a.o.weight").unwrap());
        let v: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wv.data()[i * 4 + j] * x.data()[j]).sum()).collect();
        for i in 0..4 {
            let want: f64 = (0..4).map(|j| wo.data()[i * 4 + j] * v[j]).sum();
            assert!((g.value(y).data()[i] - want).abs() < 1e-12);
        }
    }
}
