//! SCTNet: stem, residual stages 1-2, CFBlock stages 3-4, DAPPM and the
//! segmentation head.

use crate::autograd::{Graph, Var};
use crate::cfblock::{add_cfblock, cfblock_forward, CfBlockConfig};
use crate::error::{bail, Result};
use crate::ops::{BnMode, Conv2dGeom, PoolGeom};
use crate::param::{add_conv_bn, Binder, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Prefixes of parameters that only exist for training and are excluded
/// from inference checkpoints and parameter counts.
pub const TRAIN_ONLY_PREFIXES: [&str; 3] = ["aux_head.", "bfa.", "sdha."];

pub fn is_train_only(name: &str) -> bool {
    TRAIN_ONLY_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub layers: [usize; 4],
    pub key_count: usize,
    pub kernel_size: usize,
    pub gdn_groups: usize,
    pub num_classes: usize,
    pub decoder_width: usize,
    pub dappm_branch_width: usize,
    pub aux_enabled: bool,
}

impl ModelConfig {
    fn with_channels(channels: [usize; 4], key_count: usize, gdn_groups: usize, num_classes: usize) -> Self {
        ModelConfig {
            channels,
            layers: [2, 2, 3, 2],
            key_count,
            kernel_size: 7,
            gdn_groups,
            num_classes,
            decoder_width: channels[3] / 4,
            dappm_branch_width: channels[3] / 4,
            aux_enabled: true,
        }
    }

    pub fn base(num_classes: usize) -> Self {
        Self::with_channels([64, 128, 256, 512], 64, 8, num_classes)
    }

    pub fn small(num_classes: usize) -> Self {
        Self::with_channels([32, 64, 128, 256], 64, 8, num_classes)
    }

    /// Reduced variant for fast experiments and tests.
    pub fn small_toy(num_classes: usize) -> Self {
        Self::with_channels([16, 32, 64, 128], 16, 4, num_classes)
    }

    /// Looks up a named variant: `B`, `S` or `S-toy`.
    pub fn variant(name: &str, num_classes: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "b" | "base" => Ok(Self::base(num_classes)),
            "s" | "small" => Ok(Self::small(num_classes)),
            "s-toy" | "toy" => Ok(Self::small_toy(num_classes)),
            _ => bail!(Config, "unknown model variant {name:?} (expected B, S or S-toy)"),
        }
    }

    pub fn cfblock(&self, stage: usize) -> CfBlockConfig {
        CfBlockConfig { channels: self.channels[stage], keys: self.key_count, kernel: self.kernel_size, groups: self.gdn_groups }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            bail!(Config, "model channels must be positive, got {:?}", self.channels);
        }
        if self.layers.iter().any(|&l| l == 0) {
            bail!(Config, "every stage needs at least one block, got {:?}", self.layers);
        }
        if self.num_classes == 0 || self.decoder_width == 0 || self.dappm_branch_width == 0 {
            bail!(Config, "num_classes, decoder_width and dappm_branch_width must be positive");
        }
        self.cfblock(2).validate()
    }
}

/// Per-stage features and predictions of one forward pass.
#[derive(Debug, Clone)]
pub struct StageOutputs<T> {
    pub s1: T,
    pub s2: T,
    pub s3: T,
    pub s4: T,
    /// Concatenation of stage 2 and the upsampled DAPPM output (stride 8).
    pub decoder_feat: T,
    pub logits: T,
    pub aux_logits: Option<T>,
}

impl<T> StageOutputs<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> StageOutputs<U> {
        StageOutputs {
            s1: f(self.s1),
            s2: f(self.s2),
            s3: f(self.s3),
            s4: f(self.s4),
            decoder_feat: f(self.decoder_feat),
            logits: f(self.logits),
            aux_logits: self.aux_logits.map(f),
        }
    }
}

const DAPPM_POOLS: [(usize, usize); 3] = [(5, 2), (9, 4), (17, 8)];

fn add_resblock<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, c: usize) -> Result<()> {
    add_conv_bn(store, rng, &format!("{prefix}.conv1"), c, c, 3)?;
    add_conv_bn(store, rng, &format!("{prefix}.conv2"), c, c, 3)
}

fn add_head<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, prefix: &str, cin: usize, mid: usize, classes: usize) -> Result<()> {
    add_conv_bn(store, rng, &format!("{prefix}.conv"), mid, cin, 3)?;
    store.add_conv(rng, &format!("{prefix}.cls"), classes, mid, 1, 1, true)
}

fn add_dappm<S: Scalar>(store: &mut ParamStore<S>, rng: &mut Rng, cin: usize, bw: usize, out: usize) -> Result<()> {
    for i in 0..5 {
        add_conv_bn(store, rng, &format!("dappm.scale{i}"), bw, cin, 1)?;
    }
    for i in 1..5 {
        add_conv_bn(store, rng, &format!("dappm.process{i}"), bw, bw, 3)?;
    }
    add_conv_bn(store, rng, "dappm.compression", out, 5 * bw, 1)?;
    add_conv_bn(store, rng, "dappm.shortcut", out, cin, 1)
}

/// Deterministically initialized parameter set for `cfg`.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut store = ParamStore::new();
    let [c1, c2, _, c4] = cfg.channels;

    let mut rng = root.fork("stem");
    add_conv_bn(&mut store, &mut rng, "stem.0", c1, 3, 3)?;
    add_conv_bn(&mut store, &mut rng, "stem.1", c1, c1, 3)?;
    for stage in 0..4 {
        let mut rng = root.fork(&format!("stage{}", stage + 1));
        let c = cfg.channels[stage];
        if stage > 0 {
            add_conv_bn(&mut store, &mut rng, &format!("down{}", stage + 1), c, cfg.channels[stage - 1], 3)?;
        }
        for i in 0..cfg.layers[stage] {
            let prefix = format!("stage{}.{i}", stage + 1);
            if stage < 2 {
                add_resblock(&mut store, &mut rng, &prefix, c)?;
            } else {
                add_cfblock(&mut store, &mut rng, &prefix, &cfg.cfblock(stage))?;
            }
        }
    }
    add_dappm(&mut store, &mut root.fork("dappm"), c4, cfg.dappm_branch_width, cfg.decoder_width)?;
    add_head(&mut store, &mut root.fork("head"), "head", c2 + cfg.decoder_width, cfg.decoder_width, cfg.num_classes)?;
    if cfg.aux_enabled {
        add_head(&mut store, &mut root.fork("aux_head"), "aux_head", c2, cfg.decoder_width, cfg.num_classes)?;
    }
    Ok(store)
}

/// Learnable scalars used at inference: batch-norm buffers and training-only
/// parameters (auxiliary head, alignment projections) are excluded.
pub fn count_params<S: Scalar>(store: &ParamStore<S>) -> usize {
    store
        .iter()
        .filter(|p| p.kind == ParamKind::Weight && !is_train_only(&p.name))
        .map(|p| p.value.numel())
        .sum()
}

/// Inference subset of a parameter set.
pub fn inference_params<S: Scalar>(store: &ParamStore<S>) -> ParamStore<S> {
    store.subset(|n| !is_train_only(n))
}

pub fn resblock_forward<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, prefix: &str, x: Var) -> Result<Var> {
    let h = b.conv_bn_relu(g, &format!("{prefix}.conv1"), x, Conv2dGeom::same(3, 3))?;
    let h = b.conv_bn(g, &format!("{prefix}.conv2"), h, Conv2dGeom::same(3, 3))?;
    let y = g.add(x, h)?;
    g.relu(y)
}

/// Pooling pyramid with hierarchical fusion. Pools use half-kernel padding,
/// so every window overlaps the input and any `h, w >= 1` is accepted.
pub fn dappm_forward<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let (h, w) = (s.h(), s.w());
    let unit = Conv2dGeom::unit();
    let mut scales = vec![b.conv_bn_relu(g, "dappm.scale0", x, unit)?];
    for (i, &(kernel, stride)) in DAPPM_POOLS.iter().enumerate() {
        let p = g.avg_pool2d(x, PoolGeom { kernel, stride, padding: kernel / 2 })?;
        let p = b.conv_bn_relu(g, &format!("dappm.scale{}", i + 1), p, unit)?;
        scales.push(g.bilinear_resize(p, h, w)?);
    }
    let p = g.global_avg_pool(x)?;
    let p = b.conv_bn_relu(g, "dappm.scale4", p, unit)?;
    scales.push(g.bilinear_resize(p, h, w)?);

    let mut fused = vec![scales[0]];
    for (i, &sc) in scales.iter().enumerate().skip(1) {
        let sum = g.add(sc, fused[i - 1])?;
        fused.push(b.conv_bn_relu(g, &format!("dappm.process{i}"), sum, Conv2dGeom::same(3, 3))?);
    }
    let cat = g.concat_channels(&fused)?;
    let out = b.conv_bn(g, "dappm.compression", cat, unit)?;
    let short = b.conv_bn(g, "dappm.shortcut", x, unit)?;
    g.add(out, short)
}

/// 3x3 Conv-BN-ReLU followed by a 1x1 classifier, at feature resolution.
pub fn seg_head_forward<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, prefix: &str, x: Var) -> Result<Var> {
    let h = b.conv_bn_relu(g, &format!("{prefix}.conv"), x, Conv2dGeom::same(3, 3))?;
    b.conv(g, &format!("{prefix}.cls"), h, Conv2dGeom::unit())
}

pub fn check_input_geometry(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        bail!(Geometry, "input height and width must be positive multiples of 32, got {h}x{w}");
    }
    Ok(())
}

/// Full forward pass; batch-norm mode and auxiliary head follow `b.mode()`.
pub fn model_forward<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, cfg: &ModelConfig, x: Var) -> Result<StageOutputs<Var>> {
    let s = g.shape(x);
    if s.c() != 3 {
        bail!(Dimension, "model input must have 3 channels, got {}", s.c());
    }
    check_input_geometry(s.h(), s.w())?;
    let down = Conv2dGeom::new((2, 2), (1, 1));

    let h = b.conv_bn_relu(g, "stem.0", x, down)?;
    let mut h = b.conv_bn_relu(g, "stem.1", h, down)?;
    let mut stages = Vec::with_capacity(4);
    for stage in 0..4 {
        if stage > 0 {
            h = b.conv_bn_relu(g, &format!("down{}", stage + 1), h, down)?;
        }
        for i in 0..cfg.layers[stage] {
            let prefix = format!("stage{}.{i}", stage + 1);
            h = if stage < 2 {
                resblock_forward(g, b, &prefix, h)?
            } else {
                cfblock_forward(g, b, &prefix, h, &cfg.cfblock(stage))?
            };
        }
        stages.push(h);
    }
    let (s2, s4) = (stages[1], stages[3]);
    let d = dappm_forward(g, b, s4)?;
    let s2_shape = g.shape(s2);
    let d = g.bilinear_resize(d, s2_shape.h(), s2_shape.w())?;
    let decoder_feat = g.concat_channels(&[s2, d])?;
    let logits = seg_head_forward(g, b, "head", decoder_feat)?;
    let logits = g.bilinear_resize(logits, s.h(), s.w())?;
    let aux_logits = if b.mode() == BnMode::Train && cfg.aux_enabled {
        let a = seg_head_forward(g, b, "aux_head", s2)?;
        Some(g.bilinear_resize(a, s.h(), s.w())?)
    } else {
        None
    };
    Ok(StageOutputs { s1: stages[0], s2, s3: stages[2], s4, decoder_feat, logits, aux_logits })
}

/// Eval-mode forward without a tape.
pub fn infer<S: Scalar>(cfg: &ModelConfig, params: &mut ParamStore<S>, x: &Tensor<S>) -> Result<StageOutputs<Tensor<S>>> {
    let mut g = Graph::no_grad();
    let mut b = Binder::new(params, BnMode::Eval);
    let xv = g.input(x.clone());
    let out = model_forward(&mut g, &mut b, cfg, xv)?;
    Ok(out.map(|v| g.value(v).clone()))
}

/// Mirror index without edge repetition, periodic for pads longer than the
/// input.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads bottom and right edges up to `h` x `w`.
pub fn reflect_pad<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if h < s.h() || w < s.w() || s.hw() == 0 {
        bail!(Geometry, "cannot reflect-pad {s} to {h}x{w}");
    }
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), h, w));
    let rows: Vec<usize> = (0..h).map(|y| reflect_index(y, s.h())).collect();
    let cols: Vec<usize> = (0..w).map(|x| reflect_index(x, s.w())).collect();
    let dst = out.data_mut();
    for nc in 0..s.n() * s.c() {
        let src = &x.data()[nc * s.hw()..(nc + 1) * s.hw()];
        for (y, &sy) in rows.iter().enumerate() {
            for (xx, &sx) in cols.iter().enumerate() {
                dst[nc * h * w + y * w + xx] = src[sy * s.w() + sx];
            }
        }
    }
    Ok(out)
}

/// Top-left `h` x `w` window.
pub fn crop<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if h > s.h() || w > s.w() {
        bail!(Geometry, "cannot crop {s} to {h}x{w}");
    }
    let mut data = Vec::with_capacity(s.n() * s.c() * h * w);
    for nc in 0..s.n() * s.c() {
        for y in 0..h {
            let row = nc * s.hw() + y * s.w();
            data.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), h, w), data)
}

/// Eval-mode logits for any input size: reflect-pad to a multiple of 32,
/// run the network, crop back.
pub fn infer_logits_any_size<S: Scalar>(cfg: &ModelConfig, params: &mut ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.h() == 0 || s.w() == 0 {
        bail!(Geometry, "empty input {s}");
    }
    let (ph, pw) = (s.h().div_ceil(32) * 32, s.w().div_ceil(32) * 32);
    if (ph, pw) == (s.h(), s.w()) {
        return Ok(infer(cfg, params, x)?.logits);
    }
    let padded = reflect_pad(x, ph, pw)?;
    crop(&infer(cfg, params, &padded)?.logits, s.h(), s.w())
}

/// Per-pixel argmax over classes: `[N, H, W]` labels.
pub fn argmax_classes<S: Scalar>(logits: &Tensor<S>) -> Vec<i32> {
    let s = logits.shape();
    let hw = s.hw();
    let mut out = vec![0i32; s.n() * hw];
    for n in 0..s.n() {
        for p in 0..hw {
            let mut best = (S::neg_infinity(), 0);
            for c in 0..s.c() {
                let v = logits.data()[(n * s.c() + c) * hw + p];
                if v > best.0 {
                    best = (v, c);
                }
            }
            out[n * hw + p] = best.1 as i32;
        }
    }
    out
}
