//! Teacher pre-training, student training with optional alignment, and
//! evaluation.

use std::fmt::Write as _;

use crate::alignment::{add_alignment_params, total_loss, AlignmentConfig, LossBreakdown, TeacherContext};
use crate::autograd::Graph;
use crate::error::{bail, Result};
use crate::harness::dataset::{make_batch, SegSample};
use crate::harness::metrics::{ConfusionMatrix, Metrics};
use crate::model::{argmax_classes, build_model, infer, model_forward, ModelConfig};
use crate::ops::BnMode;
use crate::optim::{poly_lr, AdamWConfig, OptimizerState};
use crate::param::{Binder, ParamStore};
use crate::rng::Rng;
use crate::teacher::{build_teacher, teacher_forward, teacher_infer, TeacherConfig};

pub const IGNORE_INDEX: i32 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Validation every this many iterations (0 = only at the end).
    pub eval_interval: usize,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    pub alignment: AlignmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr: 4e-4,
            weight_decay: 0.0125,
            power: 0.9,
            eval_interval: 500,
            seed: 0,
            flip: false,
            alignment: AlignmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            bail!(Config, "train.iterations must be > 0");
        }
        if self.batch_size == 0 {
            bail!(Config, "train.batch_size must be > 0");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.power > 0.0) {
            bail!(Config, "train.lr and train.power must be > 0, train.weight_decay >= 0");
        }
        self.alignment.validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
}

pub const LOG_HEADER: &str =
    "iter\tlr\tloss_total\tloss_main\tloss_aux\tloss_logits\tloss_decoder\tloss_s4\tloss_s3\tval_miou";

/// Tab-separated metrics log with a header line.
pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = write!(
            s,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t",
            r.iter, r.lr, l.total, l.main, l.aux, l.logits, l.decoder, l.stage4, l.stage3
        );
        if let Some(m) = r.val_miou {
            let _ = write!(s, "{m:.6}");
        }
        s.push('\n');
    }
    s
}

/// Deterministic epoch-wise shuffled batch indices.
struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Self {
        BatchSampler { rng, order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    for i in (1..self.order.len()).rev() {
                        let j = self.rng.int_range(0, i + 1);
                        self.order.swap(i, j);
                    }
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn batch(data: &[SegSample], idx: &[usize], flip_rng: Option<&mut Rng>) -> Result<(crate::Tensor<f32>, Vec<i32>)> {
    let samples: Vec<&SegSample> = idx.iter().map(|&i| &data[i]).collect();
    match flip_rng {
        Some(rng) => {
            let flips: Vec<bool> = idx.iter().map(|_| rng.bernoulli(0.5)).collect();
            make_batch(&samples, Some(&flips))
        }
        None => make_batch(&samples, None),
    }
}

pub struct TeacherRun {
    pub params: ParamStore<f32>,
    pub log: Vec<LogRow>,
}

/// Cross-entropy training of the teacher; the returned parameters are
/// frozen.
pub fn train_teacher(tcfg: &TeacherConfig, data: &[SegSample], cfg: &TrainConfig) -> Result<TeacherRun> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Data, "teacher training needs at least one sample");
    }
    let mut params = build_teacher::<f32>(tcfg, cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.adamw());
    let root = Rng::new(cfg.seed).fork("teacher-train");
    let mut sampler = BatchSampler::new(data.len(), root.fork("batches"));
    let mut flip_rng = root.fork("flip");
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let lr = poly_lr(cfg.lr, iter, cfg.iterations, cfg.power);
        let idx = sampler.next(cfg.batch_size);
        let (x, y) = batch(data, &idx, cfg.flip.then_some(&mut flip_rng))?;
        params.zero_grads();
        let mut g = Graph::new();
        let mut b = Binder::new(&mut params, BnMode::Train);
        let xv = g.input(x);
        let out = teacher_forward(&mut g, &mut b, tcfg, xv).map_err(|e| at_iter(e, iter))?;
        let (loss, _) = g.cross_entropy(out.logits, &y, IGNORE_INDEX).map_err(|e| at_iter(e, iter))?;
        let grads = g.backward(loss)?;
        b.collect_grads(&grads);
        let v = g.scalar(loss) as f64;
        opt.step(&mut params, lr);
        log.push(LogRow { iter, lr, loss: LossBreakdown { total: v, main: v, ..Default::default() }, val_miou: None });
    }
    params.freeze();
    Ok(TeacherRun { params, log })
}

fn at_iter(e: crate::Error, iter: usize) -> crate::Error {
    match e {
        crate::Error::NonFinite(msg) => crate::Error::NonFinite(format!("training diverged at iteration {iter}: {msg}")),
        other => other,
    }
}

/// Frozen teacher used as the alignment target.
pub struct TeacherRef<'a> {
    pub cfg: &'a TeacherConfig,
    pub params: &'a ParamStore<f32>,
}

pub struct StudentRun {
    /// Student weights plus training-only parameters (auxiliary head and
    /// alignment projections).
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: Vec<LogRow>,
    pub final_metrics: Option<Metrics>,
}

pub fn train_student(
    mcfg: &ModelConfig,
    teacher: Option<TeacherRef>,
    data: &[SegSample],
    val: Option<&[SegSample]>,
    cfg: &TrainConfig,
) -> Result<StudentRun> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Data, "student training needs at least one sample");
    }
    let align = &cfg.alignment;
    let mut params = build_model::<f32>(mcfg, cfg.seed)?;
    let mut teacher = match (align.needs_teacher(), teacher) {
        (false, _) => None,
        (true, None) => bail!(Config, "alignment weights are non-zero but no teacher was supplied"),
        (true, Some(t)) => {
            add_alignment_params(&mut params, cfg.seed, mcfg, t.cfg)?;
            let mut frozen = t.params.clone();
            frozen.freeze();
            Some((t.cfg, frozen))
        }
    };
    let mut opt = OptimizerState::new(&params, cfg.adamw());
    let root = Rng::new(cfg.seed).fork("student-train");
    let mut sampler = BatchSampler::new(data.len(), root.fork("batches"));
    let mut flip_rng = root.fork("flip");
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut final_metrics = None;
    for iter in 0..cfg.iterations {
        let lr = poly_lr(cfg.lr, iter, cfg.iterations, cfg.power);
        let idx = sampler.next(cfg.batch_size);
        let (x, y) = batch(data, &idx, cfg.flip.then_some(&mut flip_rng))?;
        let t_out = match &mut teacher {
            Some((tcfg, tp)) => Some(teacher_infer(tcfg, tp, &x)?),
            None => None,
        };
        params.zero_grads();
        let mut g = Graph::new();
        let mut b = Binder::new(&mut params, BnMode::Train);
        let xv = g.input(x);
        let out = model_forward(&mut g, &mut b, mcfg, xv).map_err(|e| at_iter(e, iter))?;
        let t_vars = t_out.map(|t| t.map(|v| g.input(v)));
        let (loss, bd) = match (&mut teacher, &t_vars) {
            (Some((tcfg, tp)), Some(tv)) => {
                let mut tb = Binder::new(tp, BnMode::Eval);
                let ctx = TeacherContext { cfg: tcfg, outputs: tv, binder: &mut tb };
                total_loss(&mut g, &out, &y, IGNORE_INDEX, align, &mut b, Some(ctx))
            }
            _ => total_loss(&mut g, &out, &y, IGNORE_INDEX, align, &mut b, None),
        }
        .map_err(|e| at_iter(e, iter))?;
        let grads = g.backward(loss)?;
        b.collect_grads(&grads);
        opt.step(&mut params, lr);

        let last = iter + 1 == cfg.iterations;
        let due = cfg.eval_interval > 0 && (iter + 1) % cfg.eval_interval == 0;
        let val_miou = match val {
            Some(v) if !v.is_empty() && (due || last) => {
                let m = evaluate(mcfg, &mut params, v, cfg.batch_size)?;
                let miou = m.miou;
                if last {
                    final_metrics = Some(m);
                }
                Some(miou)
            }
            _ => None,
        };
        log.push(LogRow { iter, lr, loss: bd, val_miou });
    }
    Ok(StudentRun { params, optimizer: opt, log, final_metrics })
}

/// Eval-mode segmentation metrics over `data`.
pub fn evaluate(mcfg: &ModelConfig, params: &mut ParamStore<f32>, data: &[SegSample], batch_size: usize) -> Result<Metrics> {
    let mut conf = ConfusionMatrix::new(mcfg.num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch(data, chunk, None)?;
        let out = infer(mcfg, params, &x)?;
        conf.update(&y, &argmax_classes(&out.logits), IGNORE_INDEX)?;
    }
    conf.metrics()
}

/// Moving average over `window` consecutive values.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut acc: f64 = xs[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..xs.len() {
        acc += xs[i] - xs[i - window];
        out.push(acc / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, Rng::new(0));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn moving_average_basic() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn log_format() {
        let rows = [LogRow { iter: 3, lr: 1e-4, loss: LossBreakdown { total: 1.0, main: 1.0, ..Default::default() }, val_miou: Some(0.5) }];
        let s = format_log(&rows);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0].split('\t').count(), 10);
        assert_eq!(lines[1].split('\t').count(), 10);
        assert!(lines[1].starts_with("3\t1.000000e-4\t1.000000"));
    }
}
