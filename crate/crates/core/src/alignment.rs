//! Training-only alignment of student features to the teacher: backbone
//! feature alignment (BFA), shared decoder head alignment (SDHA) and the
//! combined training loss.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::model::{ModelConfig, StageOutputs};
use crate::ops::Conv2dGeom;
use crate::param::{Binder, ParamStore};
use crate::rng::Rng;
use crate::teacher::{teacher_decode_external, TeacherConfig, TeacherOutputs};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Logits,
    Decoder,
    Stage4,
    Stage3,
}

impl Location {
    /// Order used by weight vectors and reports.
    pub const ALL: [Location; 4] = [Location::Logits, Location::Decoder, Location::Stage4, Location::Stage3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Location::Logits => "logits",
            Location::Decoder => "decoder",
            Location::Stage4 => "stage4",
            Location::Stage3 => "stage3",
        }
    }
}

impl FromStr for Location {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "logits" => Ok(Location::Logits),
            "decoder" => Ok(Location::Decoder),
            "stage4" => Ok(Location::Stage4),
            "stage3" => Ok(Location::Stage3),
            other => bail!(Config, "unknown alignment location {other:?} (expected logits, decoder, stage4, stage3)"),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossType {
    Cwd,
    Kl,
    L2,
}

impl FromStr for LossType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cwd" => Ok(LossType::Cwd),
            "kl" => Ok(LossType::Kl),
            "l2" => Ok(LossType::L2),
            other => bail!(Config, "unknown alignment loss type {other:?} (expected cwd, kl or l2)"),
        }
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossType::Cwd => "cwd",
            LossType::Kl => "kl",
            LossType::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub locations: Vec<Location>,
    /// Weight per location, indexed by [`Location::index`].
    pub weights: [f64; 4],
    pub loss_type: LossType,
    pub lambda_main: f64,
    pub lambda_aux: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temperature: 4.0,
            locations: Location::ALL.to_vec(),
            weights: [3.0, 15.0, 15.0, 15.0],
            loss_type: LossType::Cwd,
            lambda_main: 1.0,
            lambda_aux: 0.4,
        }
    }
}

impl AlignmentConfig {
    /// Cross-entropy only.
    pub fn disabled() -> Self {
        AlignmentConfig { locations: Vec::new(), weights: [0.0; 4], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Config, "alignment temperature must be > 0, got {}", self.temperature);
        }
        if self.weights.iter().chain([&self.lambda_main, &self.lambda_aux]).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            bail!(Config, "loss weights must be finite and >= 0");
        }
        Ok(())
    }

    /// Effective weight of a location: zero when the location is disabled.
    pub fn weight(&self, loc: Location) -> f64 {
        if self.locations.contains(&loc) {
            self.weights[loc.index()]
        } else {
            0.0
        }
    }

    pub fn active(&self, loc: Location) -> bool {
        self.weight(loc) > 0.0
    }

    pub fn needs_teacher(&self) -> bool {
        Location::ALL.iter().any(|&l| self.active(l))
    }
}

/// Registers BFA projections (`bfa.stage3`, `bfa.stage4`) and the SDHA
/// expansion (`sdha.expand`). All are bias-free 1x1 convs.
pub fn add_alignment_params<S: Scalar>(
    store: &mut ParamStore<S>,
    seed: u64,
    model: &ModelConfig,
    teacher: &TeacherConfig,
) -> Result<()> {
    let root = Rng::new(seed).fork("alignment");
    let [_, c2, c3, c4] = model.channels;
    let e = teacher.embed_dims;
    store.add_conv(&mut root.fork("bfa.stage3"), "bfa.stage3", e[2], c3, 1, 1, false)?;
    store.add_conv(&mut root.fork("bfa.stage4"), "bfa.stage4", e[3], c4, 1, 1, false)?;
    store.add_conv(&mut root.fork("sdha"), "sdha.expand", 4 * teacher.decoder_embed, c2 + c4, 1, 1, false)?;
    Ok(())
}

pub fn align_loss<S: Scalar>(g: &mut Graph<S>, s: Var, t: Var, loss: LossType, temperature: f64) -> Result<Var> {
    match loss {
        LossType::Cwd => g.cwd_loss(s, t, S::from_f64(temperature)),
        LossType::Kl => g.kl_loss(s, t, S::from_f64(temperature)),
        LossType::L2 => g.l2_loss(s, t),
    }
}

fn resize_like<S: Scalar>(g: &mut Graph<S>, x: Var, like: Var) -> Result<Var> {
    let s = g.shape(like);
    g.bilinear_resize(x, s.h(), s.w())
}

/// Projects a student stage feature to the teacher width after resampling
/// to the teacher's resolution, then compares with the (constant) teacher
/// feature.
pub fn bfa_loss<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    proj: &str,
    s_feat: Var,
    t_feat: Var,
    loss: LossType,
    temperature: f64,
) -> Result<Var> {
    let s = resize_like(g, s_feat, t_feat)?;
    let s = b.conv(g, proj, s, Conv2dGeom::unit())?;
    let t = g.detach(t_feat);
    align_loss(g, s, t, loss, temperature)
}

/// Pushes expanded student features through the frozen teacher decoder and
/// returns the unweighted (feature, logit) alignment losses.
#[allow(clippy::too_many_arguments)]
pub fn sdha_loss<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    teacher_b: &mut Binder<S>,
    teacher_cfg: &TeacherConfig,
    s2: Var,
    s4: Var,
    teacher: &TeacherOutputs<Var>,
    loss: LossType,
    temperature: f64,
) -> Result<(Var, Var)> {
    let s4u = resize_like(g, s4, s2)?;
    let u = g.concat_channels(&[s2, s4u])?;
    let u = b.conv(g, "sdha.expand", u, Conv2dGeom::unit())?;
    let u = resize_like(g, u, teacher.fused)?;
    let (f_new, z_new) = teacher_decode_external(g, teacher_b, teacher_cfg, u)?;
    let z_new = resize_like(g, z_new, teacher.logits)?;
    let fused = g.detach(teacher.fused);
    let logits = g.detach(teacher.logits);
    let feat = align_loss(g, f_new, fused, loss, temperature)?;
    let logit = align_loss(g, z_new, logits, loss, temperature)?;
    Ok((feat, logit))
}

/// Weighted contribution of every term; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub logits: f64,
    pub decoder: f64,
    pub stage4: f64,
    pub stage3: f64,
}

impl LossBreakdown {
    pub fn alignment(&self, loc: Location) -> f64 {
        match loc {
            Location::Logits => self.logits,
            Location::Decoder => self.decoder,
            Location::Stage4 => self.stage4,
            Location::Stage3 => self.stage3,
        }
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.main, self.aux, self.logits, self.decoder, self.stage4, self.stage3]
    }
}

/// Teacher-side context needed by the alignment terms.
pub struct TeacherContext<'a, 'p, S: Scalar> {
    pub cfg: &'a TeacherConfig,
    /// Teacher outputs as constants in the student graph.
    pub outputs: &'a TeacherOutputs<Var>,
    /// Binder over the frozen teacher parameters (decoder used by SDHA).
    pub binder: &'a mut Binder<'p, S>,
}

/// `λ_main·CE + λ_aux·CE_aux + Σ λ_loc · align_loc`. Locations with zero
/// weight are not evaluated at all.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: &StageOutputs<Var>,
    labels: &[i32],
    ignore_index: i32,
    cfg: &AlignmentConfig,
    align_b: &mut Binder<S>,
    teacher: Option<TeacherContext<S>>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut terms: Vec<(f64, Var, &'static str)> = Vec::new();
    let (ce, _) = g.cross_entropy(student.logits, labels, ignore_index)?;
    terms.push((cfg.lambda_main, ce, "main"));
    if let Some(aux) = student.aux_logits {
        if cfg.lambda_aux > 0.0 {
            let (ce, _) = g.cross_entropy(aux, labels, ignore_index)?;
            terms.push((cfg.lambda_aux, ce, "aux"));
        }
    }
    if cfg.needs_teacher() {
        let Some(t) = teacher else {
            bail!(Config, "alignment weights are non-zero but no teacher was supplied");
        };
        let (lt, temp) = (cfg.loss_type, cfg.temperature);
        let w = |l| cfg.weight(l);
        if cfg.active(Location::Logits) {
            let s = resize_like(g, student.logits, t.outputs.logits)?;
            let tl = g.detach(t.outputs.logits);
            terms.push((w(Location::Logits), align_loss(g, s, tl, lt, temp)?, "logits"));
        }
        if cfg.active(Location::Decoder) {
            let (feat, logit) = sdha_loss(g, align_b, t.binder, t.cfg, student.s2, student.s4, t.outputs, lt, temp)?;
            terms.push((w(Location::Decoder), feat, "decoder"));
            terms.push((w(Location::Logits), logit, "logits"));
        }
        if cfg.active(Location::Stage4) {
            let l = bfa_loss(g, align_b, "bfa.stage4", student.s4, t.outputs.t4, lt, temp)?;
            terms.push((w(Location::Stage4), l, "stage4"));
        }
        if cfg.active(Location::Stage3) {
            let l = bfa_loss(g, align_b, "bfa.stage3", student.s3, t.outputs.t3, lt, temp)?;
            terms.push((w(Location::Stage3), l, "stage3"));
        }
    }
    let mut bd = LossBreakdown::default();
    for &(weight, v, name) in &terms {
        let c = weight * g.scalar(v).to_f64();
        match name {
            "main" => bd.main += c,
            "aux" => bd.aux += c,
            "logits" => bd.logits += c,
            "decoder" => bd.decoder += c,
            "stage4" => bd.stage4 += c,
            _ => bd.stage3 += c,
        }
    }
    let weighted: Vec<(S, Var)> = terms.iter().map(|&(w, v, _)| (S::from_f64(w), v)).collect();
    let total = g.weighted_sum(&weighted)?;
    bd.total = g.scalar(total).to_f64();
    Ok((total, bd))
}
