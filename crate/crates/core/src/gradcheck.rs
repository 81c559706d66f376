//! Central finite-difference verification of reverse-mode gradients, run in
//! 64-bit precision, plus the built-in suite of checks over every operator
//! and network block.

use crate::alignment::{add_alignment_params, bfa_loss, sdha_loss, LossType};
use crate::autograd::{Graph, Var};
use crate::cfblock::{self, CfBlockConfig};
use crate::error::{bail, Result};
use crate::model::{self, ModelConfig};
use crate::ops::{BnMode, Conv2dGeom, PoolGeom};
use crate::param::{add_conv_bn, Binder, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::teacher::{self, TeacherConfig};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Relative step: `h = step * max(1, |θ|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all coordinates when the tensor is
    /// smaller).
    pub samples: usize,
    /// Denominator floor of the relative error, so exactly-zero gradients
    /// (e.g. a bias feeding a train-mode batch norm) are compared against
    /// finite-difference roundoff absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, samples: 12, floor: 1e-5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: String,
    pub coords: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} coords={} worst={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.coords,
            self.worst
        )
    }
}

/// Loss builder: receives the graph, a binder over the checked parameter
/// set, and must return a scalar node.
pub type LossFn<'a> = dyn FnMut(&mut Graph<f64>, &mut Binder<f64>) -> Result<Var> + 'a;

fn eval_loss(store: &mut ParamStore<f64>, mode: BnMode, f: &mut LossFn) -> Result<f64> {
    let mut g = Graph::no_grad();
    let mut b = Binder::new(store, mode);
    let root = f(&mut g, &mut b)?;
    if g.shape(root).numel() != 1 {
        bail!(Dimension, "gradient check needs a scalar loss, got {}", g.shape(root));
    }
    let v = g.scalar(root);
    if !v.is_finite() {
        bail!(NonFinite, "loss evaluated to {v}; gradient check aborted");
    }
    Ok(v)
}

/// Compares analytic gradients of every trainable weight in `store` with
/// central differences at sampled coordinates. Batch-norm buffers are
/// restored after each evaluation.
pub fn grad_check(name: &str, store: &mut ParamStore<f64>, mode: BnMode, f: &mut LossFn, opts: &GradCheckOptions) -> Result<GradReport> {
    let buffers: Vec<(usize, Tensor<f64>)> =
        store.iter().enumerate().filter(|(_, p)| p.kind == ParamKind::Buffer).map(|(i, p)| (i, p.value.clone())).collect();
    let restore = |store: &mut ParamStore<f64>| {
        for (i, v) in &buffers {
            store.iter_mut().nth(*i).expect("index").value = v.clone();
        }
    };

    {
        let mut g = Graph::new();
        let mut b = Binder::new(store, mode);
        let root = f(&mut g, &mut b)?;
        if !g.scalar(root).is_finite() {
            bail!(NonFinite, "{name}: loss is not finite; gradient check aborted");
        }
        let grads = g.backward(root)?;
        b.collect_grads(&grads);
    }
    restore(store);

    let mut rng = Rng::new(opts.seed).fork(name);
    let mut report = GradReport { name: name.to_string(), max_rel_err: 0.0, worst: String::new(), coords: 0, passed: true };
    let targets: Vec<usize> =
        (0..store.len()).filter(|&i| store.at(i).trainable && store.at(i).kind == ParamKind::Weight).collect();
    for pi in targets {
        let numel = store.at(pi).value.numel();
        let coords: Vec<usize> = if numel <= opts.samples {
            (0..numel).collect()
        } else {
            (0..opts.samples).map(|_| rng.int_range(0, numel)).collect()
        };
        for j in coords {
            let (theta, analytic) = {
                let p = store.at(pi);
                (p.value.data()[j], p.grad.data()[j])
            };
            let h = opts.step * theta.abs().max(1.0);
            let mut at = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.iter_mut().nth(pi).expect("index").value.data_mut()[j] = v;
                let l = eval_loss(store, mode, f);
                restore(store);
                l
            };
            let plus = at(theta + h, store)?;
            let minus = at(theta - h, store)?;
            at(theta, store)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.coords += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{j}] analytic={analytic:.6e} numeric={numeric:.6e}", store.at(pi).name);
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tolerance;
    Ok(report)
}

// ---- built-in suite --------------------------------------------------------

/// One named check of the suite.
pub struct Case {
    pub name: &'static str,
    pub group: &'static str,
    run: fn(&GradCheckOptions) -> Result<GradReport>,
}

impl Case {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradReport> {
        (self.run)(opts)
    }
}

/// Adds `name` as a trainable tensor drawn from N(0, std²).
fn leaf(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, shape: Shape, std: f64) {
    store.insert(name, rng.normal_tensor(shape, std), ParamKind::Weight).expect("unique");
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(Rng::new(seed).fork("projection").normal_tensor(g.shape(y), 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Values bounded away from zero so no ReLU sits at its kink.
fn away_from_zero(rng: &mut Rng, shape: Shape) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let m = rng.uniform_range(0.1, 1.0);
        *v = if rng.bernoulli(0.5) { m } else { -m };
    }
    t
}

fn check(name: &str, mut store: ParamStore<f64>, mode: BnMode, opts: &GradCheckOptions, f: &mut LossFn) -> Result<GradReport> {
    grad_check(name, &mut store, mode, f, opts)
}

fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<i32> {
    (0..n).map(|_| rng.int_range(0, classes) as i32).collect()
}

fn case_conv2d(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("conv2d");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 6, 5), 1.0);
    leaf(&mut s, &mut rng, "w", Shape::new(4, 3, 3, 2), 0.5);
    leaf(&mut s, &mut rng, "b", Shape::vector(4), 0.5);
    check("conv2d", s, BnMode::Train, o, &mut |g, b| {
        let (x, w, bias) = (b.get(g, "x")?, b.get(g, "w")?, b.get(g, "b")?);
        let y = g.conv2d(x, w, Some(bias), Conv2dGeom::new((2, 1), (1, 1)))?;
        project(g, y, 1)
    })
}

fn case_conv2d_relu(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("conv2d_relu");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(1, 2, 5, 5), 1.0);
    leaf(&mut s, &mut rng, "w", Shape::new(3, 2, 3, 3), 0.5);
    check("conv2d+relu", s, BnMode::Train, o, &mut |g, b| {
        let (x, w) = (b.get(g, "x")?, b.get(g, "w")?);
        let y = g.conv2d(x, w, None, Conv2dGeom::same(3, 3))?;
        let y = g.relu(y)?;
        project(g, y, 2)
    })
}

fn case_batchnorm(name: &'static str, mode: BnMode, o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork(name);
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 3, 4), 1.0);
    s.add_bn("bn", 3)?;
    s.get_mut("bn.weight").unwrap().value = rng.uniform_tensor(Shape::vector(3), 0.5, 1.5);
    s.get_mut("bn.bias").unwrap().value = rng.normal_tensor(Shape::vector(3), 0.5);
    s.get_mut("bn.running_mean").unwrap().value = rng.normal_tensor(Shape::vector(3), 0.5);
    s.get_mut("bn.running_var").unwrap().value = rng.uniform_tensor(Shape::vector(3), 0.5, 2.0);
    check(name, s, mode, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = b.bn(g, "bn", x)?;
        project(g, y, 3)
    })
}

fn case_relu(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("relu");
    let mut s = ParamStore::new();
    s.insert("x", away_from_zero(&mut rng, Shape::new(2, 2, 3, 3)), ParamKind::Weight)?;
    check("relu", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = g.relu(x)?;
        project(g, y, 4)
    })
}

fn case_softmax(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("softmax");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 4, 4), 2.0);
    check("softmax_spatial", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = g.softmax_spatial(x, 1.7)?;
        project(g, y, 5)
    })
}

fn case_group_l2(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("group_l2");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 3, 3), 1.0);
    check("group_l2_normalize", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = g.group_l2_normalize(x, 2, 1e-6)?;
        project(g, y, 6)
    })
}

fn case_bilinear(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("bilinear");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 2, 4, 6), 1.0);
    check("bilinear_resize", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let up = g.bilinear_resize(x, 7, 9)?;
        let down = g.bilinear_resize(x, 3, 2)?;
        let (a, c) = (project(g, up, 7)?, project(g, down, 8)?);
        g.add(a, c)
    })
}

fn case_pool(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("pool");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 2, 6, 5), 1.0);
    check("avg_pool2d+global", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let p = g.avg_pool2d(x, PoolGeom { kernel: 3, stride: 2, padding: 1 })?;
        let q = g.global_avg_pool(x)?;
        let (a, c) = (project(g, p, 9)?, project(g, q, 10)?);
        g.add(a, c)
    })
}

fn case_concat_slice(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("concat");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "a", Shape::new(2, 2, 3, 3), 1.0);
    leaf(&mut s, &mut rng, "b", Shape::new(2, 3, 3, 3), 1.0);
    check("concat/slice_channels", s, BnMode::Train, o, &mut |g, b| {
        let (x, y) = (b.get(g, "a")?, b.get(g, "b")?);
        let c = g.concat_channels(&[x, y, x])?;
        let sl = g.slice_channels(c, 1, 3)?;
        let m = g.mul(sl, sl)?;
        let (p, q) = (project(g, c, 11)?, project(g, m, 12)?);
        g.add(p, q)
    })
}

fn case_elementwise(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("elementwise");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "a", Shape::new(2, 2, 3, 3), 1.0);
    leaf(&mut s, &mut rng, "b", Shape::new(2, 2, 3, 3), 1.0);
    check("add/sub/mul/scale/mean", s, BnMode::Train, o, &mut |g, b| {
        let (x, y) = (b.get(g, "a")?, b.get(g, "b")?);
        let s1 = g.add(x, y)?;
        let d = g.sub(x, y)?;
        let m = g.mul(s1, d)?;
        let m = g.scale(m, 0.7)?;
        let p = project(g, m, 13)?;
        let mean = g.mean(x)?;
        g.weighted_sum(&[(1.0, p), (2.5, mean)])
    })
}

fn case_attention(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("attention");
    let mut s = ParamStore::new();
    for n in ["q", "k", "v"] {
        leaf(&mut s, &mut rng, n, Shape::new(2, 4, 2, 3), 1.0);
    }
    check("attention", s, BnMode::Train, o, &mut |g, b| {
        let (q, k, v) = (b.get(g, "q")?, b.get(g, "k")?, b.get(g, "v")?);
        let y = g.attention(q, k, v, 2)?;
        project(g, y, 14)
    })
}

fn case_cross_entropy(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("ce");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "z", Shape::new(2, 4, 3, 3), 1.5);
    let mut y = labels(&mut rng, 18, 4);
    y[3] = 255;
    check("cross_entropy", s, BnMode::Train, o, &mut |g, b| {
        let z = b.get(g, "z")?;
        Ok(g.cross_entropy(z, &y, 255)?.0)
    })
}

fn case_align_losses(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("align");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "s", Shape::new(2, 3, 3, 3), 1.0);
    let t = rng.normal_tensor(Shape::new(2, 3, 3, 3), 1.0);
    check("cwd/kl/l2 losses", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "s")?;
        let tv = g.input(t.clone());
        let a = g.cwd_loss(x, tv, 4.0)?;
        let k = g.kl_loss(x, tv, 2.0)?;
        let l = g.l2_loss(x, tv)?;
        g.weighted_sum(&[(1.0, a), (1.0, k), (1.0, l)])
    })
}

fn small_cfblock() -> CfBlockConfig {
    CfBlockConfig { channels: 4, keys: 4, kernel: 3, groups: 2 }
}

fn case_gdn(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("gdn");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 3, 3), 1.0);
    check("gdn", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = cfblock::gdn(g, x, 2, 1e-6)?;
        project(g, y, 15)
    })
}

fn case_conv_attention(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("conv_attention");
    let mut s = ParamStore::new();
    let c = small_cfblock();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 4, 5), 1.0);
    cfblock::add_conv_attention(&mut s, &mut rng, "attn", &c)?;
    check("conv_attention", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = cfblock::conv_attention(g, b, "attn", x, &c)?;
        project(g, y, 16)
    })
}

fn case_ffn(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("ffn");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 4, 4), 1.0);
    cfblock::add_ffn(&mut s, &mut rng, "ffn", 4)?;
    check("ffn", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = cfblock::ffn(g, b, "ffn", x)?;
        project(g, y, 17)
    })
}

fn case_cfblock(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("cfblock");
    let mut s = ParamStore::new();
    let c = small_cfblock();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 4, 4), 1.0);
    cfblock::add_cfblock(&mut s, &mut rng, "blk", &c)?;
    check("cfblock", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = cfblock::cfblock_forward(g, b, "blk", x, &c)?;
        project(g, y, 18)
    })
}

fn case_resblock(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("resblock");
    let mut s = ParamStore::new();
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 4, 4), 1.0);
    add_conv_bn(&mut s, &mut rng, "rb.conv1", 3, 3, 3)?;
    add_conv_bn(&mut s, &mut rng, "rb.conv2", 3, 3, 3)?;
    check("resblock", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = model::resblock_forward(g, b, "rb", x)?;
        project(g, y, 19)
    })
}

fn toy_decoder_config() -> ModelConfig {
    let mut cfg = ModelConfig::small_toy(3);
    cfg.channels = [4, 4, 4, 16];
    cfg.decoder_width = 4;
    cfg.dappm_branch_width = 4;
    cfg
}

/// Eval mode: the global-pool branch of a batch-1 input has a single value
/// per channel, which train-mode batch norm rejects.
fn case_dappm(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("dappm");
    let cfg = toy_decoder_config();
    let mut s = model::build_model::<f64>(&cfg, o.seed)?.subset(|n| n.starts_with("dappm."));
    for p in s.iter_mut().filter(|p| p.name.ends_with("running_var")) {
        p.value = rng.uniform_tensor(p.value.shape(), 0.5, 2.0);
    }
    leaf(&mut s, &mut rng, "x", Shape::new(1, 16, 8, 8), 1.0);
    check("dappm", s, BnMode::Eval, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = model::dappm_forward(g, b, x)?;
        project(g, y, 20)
    })
}

fn case_seg_head(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("seg_head");
    let cfg = toy_decoder_config();
    let mut s = model::build_model::<f64>(&cfg, o.seed)?.subset(|n| n.starts_with("head."));
    leaf(&mut s, &mut rng, "x", Shape::new(2, 8, 3, 3), 1.0);
    check("seg_head", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = model::seg_head_forward(g, b, "head", x)?;
        project(g, y, 21)
    })
}

fn toy_teacher() -> TeacherConfig {
    TeacherConfig { embed_dims: [4, 4, 4, 4], heads: [2; 4], blocks: [1; 4], mlp_ratio: 2, num_classes: 3, decoder_embed: 2 }
}

fn case_patch_embed(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("patch_embed");
    let mut s = teacher::build_teacher::<f64>(&toy_teacher(), o.seed)?.subset(|n| n.starts_with("teacher.stage2.embed"));
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 6, 6), 1.0);
    check("patch_embed", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = teacher::patch_embed(g, b, 1, x)?;
        project(g, y, 22)
    })
}

fn case_self_attention(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("self_attention");
    let mut s = teacher::build_teacher::<f64>(&toy_teacher(), o.seed)?.subset(|n| n.starts_with("teacher.stage1.block0.attn"));
    leaf(&mut s, &mut rng, "x", Shape::new(2, 4, 3, 3), 1.0);
    check("self_attention", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let y = teacher::self_attention(g, b, "teacher.stage1.block0.attn", x, 2)?;
        project(g, y, 23)
    })
}

fn case_teacher(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("teacher");
    let cfg = toy_teacher();
    let mut s = teacher::build_teacher::<f64>(&cfg, o.seed)?;
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 32, 32), 1.0);
    let y = labels(&mut rng, 2 * 32 * 32, 3);
    check("teacher_forward", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let out = teacher::teacher_forward(g, b, &cfg, x)?;
        let (ce, _) = g.cross_entropy(out.logits, &y, 255)?;
        let f = project(g, out.fused, 24)?;
        g.weighted_sum(&[(1.0, ce), (0.1, f)])
    })
}

fn case_bfa(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("bfa");
    let mut s = ParamStore::new();
    s.add_conv(&mut rng, "proj", 5, 3, 1, 1, false)?;
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 2, 3), 1.0);
    let t = rng.normal_tensor(Shape::new(2, 5, 4, 4), 1.0);
    check("bfa_loss", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let tv = g.input(t.clone());
        bfa_loss(g, b, "proj", x, tv, LossType::Cwd, 4.0)
    })
}

fn case_sdha(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("sdha");
    let tcfg = toy_teacher();
    let mcfg = toy_decoder_config();
    let mut tparams = teacher::build_teacher::<f64>(&tcfg, o.seed)?;
    tparams.freeze();
    let mut s = ParamStore::new();
    add_alignment_params(&mut s, o.seed, &mcfg, &tcfg)?;
    let mut s = s.subset(|n| n.starts_with("sdha."));
    leaf(&mut s, &mut rng, "s2", Shape::new(2, 4, 4, 4), 1.0);
    leaf(&mut s, &mut rng, "s4", Shape::new(2, 16, 1, 1), 1.0);
    let img = rng.uniform_tensor(Shape::new(2, 3, 32, 32), 0.0, 1.0);
    let tout = teacher::teacher_infer(&tcfg, &mut tparams, &img)?;
    check("sdha_loss", s, BnMode::Train, o, &mut |g, b| {
        let (s2, s4) = (b.get(g, "s2")?, b.get(g, "s4")?);
        let t = tout.clone().map(|t| g.input(t));
        let mut tb = Binder::new(&mut tparams, BnMode::Eval);
        let (f, z) = sdha_loss(g, b, &mut tb, &tcfg, s2, s4, &t, LossType::Cwd, 4.0)?;
        g.weighted_sum(&[(1.0, f), (1.0, z)])
    })
}

/// Conv-BN-ReLU stem, one CFBlock, 1x1 classifier, cross-entropy.
fn case_network(o: &GradCheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(o.seed).fork("network");
    let c = small_cfblock();
    let mut s = ParamStore::new();
    add_conv_bn(&mut s, &mut rng, "stem", 4, 3, 3)?;
    cfblock::add_cfblock(&mut s, &mut rng, "blk", &c)?;
    s.add_conv(&mut rng, "cls", 3, 4, 1, 1, true)?;
    leaf(&mut s, &mut rng, "x", Shape::new(2, 3, 6, 6), 1.0);
    let y = labels(&mut rng, 2 * 36, 3);
    check("1-cfblock network", s, BnMode::Train, o, &mut |g, b| {
        let x = b.get(g, "x")?;
        let h = b.conv_bn_relu(g, "stem", x, Conv2dGeom::same(3, 3))?;
        let h = cfblock::cfblock_forward(g, b, "blk", h, &c)?;
        let z = b.conv(g, "cls", h, Conv2dGeom::unit())?;
        Ok(g.cross_entropy(z, &y, 255)?.0)
    })
}

/// Every check of the built-in suite, in execution order.
pub fn suite() -> Vec<Case> {
    fn bn_train(o: &GradCheckOptions) -> Result<GradReport> {
        case_batchnorm("batchnorm2d(train)", BnMode::Train, o)
    }
    fn bn_eval(o: &GradCheckOptions) -> Result<GradReport> {
        case_batchnorm("batchnorm2d(eval)", BnMode::Eval, o)
    }
    let c = |name, group, run| Case { name, group, run };
    vec![
        c("conv2d", "ops", case_conv2d as fn(&GradCheckOptions) -> Result<GradReport>),
        c("conv2d+relu", "ops", case_conv2d_relu),
        c("batchnorm2d(train)", "ops", bn_train),
        c("batchnorm2d(eval)", "ops", bn_eval),
        c("relu", "ops", case_relu),
        c("softmax_spatial", "ops", case_softmax),
        c("group_l2_normalize", "ops", case_group_l2),
        c("bilinear_resize", "ops", case_bilinear),
        c("avg_pool2d+global", "ops", case_pool),
        c("concat/slice_channels", "ops", case_concat_slice),
        c("add/sub/mul/scale/mean", "ops", case_elementwise),
        c("attention", "ops", case_attention),
        c("cross_entropy", "ops", case_cross_entropy),
        c("cwd/kl/l2 losses", "ops", case_align_losses),
        c("gdn", "blocks", case_gdn),
        c("conv_attention", "blocks", case_conv_attention),
        c("ffn", "blocks", case_ffn),
        c("cfblock", "blocks", case_cfblock),
        c("resblock", "blocks", case_resblock),
        c("dappm", "blocks", case_dappm),
        c("seg_head", "blocks", case_seg_head),
        c("patch_embed", "blocks", case_patch_embed),
        c("self_attention", "blocks", case_self_attention),
        c("teacher_forward", "blocks", case_teacher),
        c("bfa_loss", "blocks", case_bfa),
        c("sdha_loss", "blocks", case_sdha),
        c("1-cfblock network", "network", case_network),
    ]
}

/// Cases selected by `scope`: `all`, a group name (`ops`, `blocks`,
/// `network`) or a single case name.
pub fn select(scope: &str) -> Result<Vec<Case>> {
    let all = suite();
    if scope == "all" {
        return Ok(all);
    }
    let picked: Vec<Case> = all.into_iter().filter(|c| c.group == scope || c.name == scope).collect();
    if picked.is_empty() {
        bail!(Config, "unknown gradcheck scope {scope:?}");
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut s = ParamStore::new();
        s.insert("x", Rng::new(0).normal_tensor(Shape::new(1, 2, 2, 2), 1.0), ParamKind::Weight).unwrap();
        let r = grad_check("linear", &mut s, BnMode::Train, &mut |g, b| {
            let x = b.get(g, "x")?;
            project(g, x, 99)
        }, &GradCheckOptions::default())
        .unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err <= 1e-10, "{r}");
        assert_eq!(r.coords, 8);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut s = ParamStore::new();
        s.insert("x", away_from_zero(&mut Rng::new(1), Shape::new(1, 2, 3, 3)), ParamKind::Weight).unwrap();
        let r = grad_check("sign-flipped relu", &mut s, BnMode::Train, &mut |g, b| {
            let x = b.get(g, "x")?;
            let value = crate::ops::relu(g.value(x));
            let y = g.custom("bad_relu", &[x], value, || {
                Box::new(|c| vec![Some(crate::ops::relu_backward(c.inputs[0], c.grad).map(|v| -v))])
            })?;
            project(g, y, 5)
        }, &GradCheckOptions::default())
        .unwrap();
        assert!(!r.passed, "{r}");
        assert!(r.max_rel_err > 1.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::full(Shape::new(1, 1, 1, 1), 1.0), ParamKind::Weight).unwrap();
        let err = grad_check("inf", &mut s, BnMode::Train, &mut |g, b| {
            let x = b.get(g, "x")?;
            g.scale(x, f64::INFINITY)
        }, &GradCheckOptions::default())
        .unwrap_err();
        assert!(matches!(err, crate::Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn scopes() {
        assert_eq!(select("all").unwrap().len(), suite().len());
        assert!(select("ops").unwrap().iter().all(|c| c.group == "ops"));
        assert_eq!(select("cfblock").unwrap().len(), 1);
        assert!(select("nope").is_err());
    }

    #[test]
    fn full_suite_passes() {
        let opts = GradCheckOptions::default();
        for case in suite() {
            let r = case.run(&opts).unwrap();
            eprintln!("{r}");
            assert!(r.passed, "{r}");
        }
    }
}
