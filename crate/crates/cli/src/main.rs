//! `sctnet` command-line driver.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, input
//! files), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sctnet::gradcheck::{self, GradCheckOptions};
use sctnet::harness::{
    self, benchmark_forward, evaluate, format_ablation, gen_dataset, run_ablation, train_student, train_teacher, SegSample, Split,
    TeacherRef,
};
use sctnet::io::checkpoint::{CheckpointMeta, TrainingState};
use sctnet::io::{self as sio, image, RunConfig};
use sctnet::model::{argmax_classes, count_params, infer_logits_any_size, inference_params, is_train_only};
use sctnet::{Error, ParamStore, Result};

#[derive(Parser)]
#[command(name = "sctnet", version, about = "Train and run SCTNet segmentation models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Training seed (same as `--set train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset container.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write the first few validation images and masks here.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Train the attention teacher with cross-entropy only.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path (default: `<out>.log.tsv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a student, optionally aligned to a teacher checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path (default: `<out>.log.tsv`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Training-state path (default: `<out>.state`).
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment one P6 image; `.ppm` output is colourized, anything else PGM.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification in f64.
    Gradcheck {
        /// all, ops, blocks, network, or a single case name.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time eval-mode forward passes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Operator threads, 0 = sequential.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Print the inference parameter count.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train one student per loss type / location set / weight vector.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => String::from_utf8(sio::read_file(p)?).map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?,
        None => String::new(),
    };
    let mut sets = common.sets.clone();
    sets.extend_from_slice(extra);
    if let Some(seed) = common.seed {
        sets.push(format!("train.seed={seed}"));
    }
    RunConfig::parse(&text, &sets)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    match path {
        Some(p) => {
            let (train, val) = sio::load_dataset(p)?;
            if let Some(bad) = train.iter().chain(&val).flat_map(|s| &s.label).find(|&&l| l != harness::train::IGNORE_INDEX && (l < 0 || l as usize >= cfg.model.num_classes)) {
                return Err(Error::Data(format!("{}: label {bad} outside {} classes", p.display(), cfg.model.num_classes)));
            }
            Ok((train, val))
        }
        None => Ok((gen_dataset(&cfg.data, Split::Train)?, gen_dataset(&cfg.data, Split::Val)?)),
    }
}

fn meta(kind: &str, cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta { kind: kind.into(), config: cfg.to_toml(), seed: cfg.train.seed }
}

fn load_kind(path: &Path, kind: &str) -> Result<(ParamStore<f32>, RunConfig)> {
    let (params, m) = sio::load_checkpoint::<f32>(path)?;
    if m.kind != kind {
        return Err(Error::Data(format!("{} is a {} checkpoint, expected {kind}", path.display(), m.kind)));
    }
    Ok((params, RunConfig::parse(&m.config, &[])?))
}

fn load_teacher(path: Option<&Path>, cfg: &RunConfig) -> Result<Option<(ParamStore<f32>, RunConfig)>> {
    let Some(path) = path else { return Ok(None) };
    let (mut params, tcfg) = load_kind(path, "teacher")?;
    if tcfg.teacher.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student config has {}",
            tcfg.teacher.num_classes, cfg.model.num_classes
        )));
    }
    params.freeze();
    Ok(Some((params, tcfg)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, preview } => {
            let cfg = load_config(&common, &[])?;
            let (train, val) = load_data(&cfg, None)?;
            sio::save_dataset(&train, &val, &out)?;
            if let Some(dir) = preview {
                for (i, s) in val.iter().take(4).enumerate() {
                    let (h, w) = (s.image.shape().h(), s.image.shape().w());
                    image::write_ppm(&s.image, &dir.join(format!("val{i}.ppm")))?;
                    image::write_mask(&s.label, h, w, cfg.model.num_classes, &dir.join(format!("val{i}.pgm")))?;
                }
            }
            println!("wrote {} train and {} val samples to {}", train.len(), val.len(), out.display());
        }
        Command::TrainTeacher { common, data, out, log } => {
            let cfg = load_config(&common, &[])?;
            let (train, _) = load_data(&cfg, data.as_deref())?;
            let run = train_teacher(&cfg.teacher, &train, &cfg.train)?;
            sio::save_checkpoint(&run.params, &meta("teacher", &cfg), &out)?;
            sio::write_atomic(&log.unwrap_or_else(|| sibling(&out, ".log.tsv")), harness::train::format_log(&run.log).as_bytes())?;
            let last = run.log.last().map(|r| r.loss.main).unwrap_or(f64::NAN);
            println!("teacher saved to {} (final CE {last:.4})", out.display());
        }
        Command::Train { common, data, teacher, out, log, state } => {
            let cfg = load_config(&common, &[])?;
            let t = load_teacher(teacher.as_deref(), &cfg)?;
            let (train, val) = load_data(&cfg, data.as_deref())?;
            let tref = t.as_ref().map(|(p, c)| TeacherRef { cfg: &c.teacher, params: p });
            let val = (!val.is_empty()).then_some(val.as_slice());
            let run = train_student(&cfg.model, tref, &train, val, &cfg.student_train())?;
            let m = meta("student", &cfg);
            sio::save_checkpoint(&inference_params(&run.params), &m, &out)?;
            let extra = run.params.subset(is_train_only);
            sio::save_training_state(&TrainingState { extra, optimizer: run.optimizer }, &m, &state.unwrap_or_else(|| sibling(&out, ".state")))?;
            sio::write_atomic(&log.unwrap_or_else(|| sibling(&out, ".log.tsv")), harness::train::format_log(&run.log).as_bytes())?;
            match run.final_metrics {
                Some(mt) => println!("student saved to {} (val mIoU {:.4})", out.display(), mt.miou),
                None => println!("student saved to {}", out.display()),
            }
        }
        Command::Eval { common, ckpt, data } => {
            let cfg = load_config(&common, &[])?;
            let (mut params, ccfg) = load_kind(&ckpt, "student")?;
            let run_cfg = RunConfig { model: ccfg.model, ..cfg };
            let (_, val) = load_data(&run_cfg, data.as_deref())?;
            let mt = evaluate(&run_cfg.model, &mut params, &val, run_cfg.train.batch_size)?;
            println!("miou\t{:.6}", mt.miou);
            println!("pixel_acc\t{:.6}", mt.pixel_acc);
            for (k, iou) in mt.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => println!("class{k}\t{v:.6}"),
                    None => println!("class{k}\tabsent"),
                }
            }
        }
        Command::Infer { common, ckpt, image: img, out } => {
            load_config(&common, &[])?;
            let (mut params, ccfg) = load_kind(&ckpt, "student")?;
            let x = image::read_ppm::<f32>(&img)?;
            let logits = infer_logits_any_size(&ccfg.model, &mut params, &x)?;
            let (h, w) = (logits.shape().h(), logits.shape().w());
            image::write_mask(&argmax_classes(&logits), h, w, ccfg.model.num_classes, &out)?;
            println!("{w}x{h} mask written to {}", out.display());
        }
        Command::Gradcheck { scope, seed } => {
            let opts = GradCheckOptions { seed: seed.unwrap_or(0), ..Default::default() };
            let mut failed = 0;
            for case in gradcheck::select(&scope)? {
                let report = case.run(&opts)?;
                println!("{report}");
                failed += usize::from(!report.passed);
            }
            if failed > 0 {
                return Err(Error::State(format!("{failed} gradient checks failed")));
            }
        }
        Command::Bench { common, batch, height, width, warmup, iters, threads } => {
            let cfg = load_config(&common, &[])?;
            let s = benchmark_forward(&cfg.model, batch, height, width, warmup, iters, threads)?;
            println!("{}", s);
        }
        Command::Params { common, variant, classes } => {
            let mut extra = Vec::new();
            if let Some(v) = variant {
                extra.push(format!("model.variant={v}"));
            }
            if let Some(c) = classes {
                extra.push(format!("model.num_classes={c}"));
            }
            let cfg = load_config(&common, &extra)?;
            let params = sctnet::model::build_model::<f32>(&cfg.model, 0)?;
            println!("{}", count_params(&params));
        }
        Command::Ablate { common, data, teacher, out } => {
            let cfg = load_config(&common, &[])?;
            let t = load_teacher(teacher.as_deref(), &cfg)?;
            let (train, val) = load_data(&cfg, data.as_deref())?;
            let tref = t.as_ref().map(|(p, c)| TeacherRef { cfg: &c.teacher, params: p });
            let rows = run_ablation(&cfg.ablate, &cfg.train, &cfg.model, tref, &train, &val)?;
            let table = format_ablation(&rows);
            sio::write_atomic(&out, table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
