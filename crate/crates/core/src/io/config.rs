//! Run configuration: TOML text with `[section]` tables, plus dotted
//! `section.key=value` overrides. Unknown keys are errors.
//!
//! Keys and defaults (the `S-toy` variant on the 6-class synthetic task):
//!
//! ```text
//! [model]   variant = "S-toy", num_classes = 6; optional explicit
//!           channels, layers, key_count, kernel_size = 7, gdn_groups,
//!           decoder_width, dappm_branch_width, aux_enabled = true
//! [teacher] embed_dims = [16,32,64,128], heads = [2,2,2,2],
//!           blocks = [1,1,1,1], mlp_ratio = 2, decoder_embed = 32
//! [data]    height = 64, width = 64, train_samples = 2000, val_samples = 100,
//!           seed = 0, max_shapes = 3, color_jitter = 0.12, noise = 0.05
//! [train]   iterations = 2000, batch_size = 8, lr = 4e-4,
//!           weight_decay = 0.0125, power = 0.9, eval_interval = 500,
//!           seed = 0, flip = false
//! [align]   enabled = false, temperature = 4.0, locations = all four, weights = [3,15,15,15],
//!           loss_type = "cwd", lambda_main = 1.0, lambda_aux = 0.4
//! [ablate]  loss_types = ["cwd","kl","l2"], location_sets = [[all four]],
//!           weight_vectors = [[3,15,15,15]]
//! ```
//!
//! Alignment terms only take effect with `align.enabled = true`; the
//! ablation runner always enables them.
//! `model.variant` is applied first and explicit model keys then override
//! it. `model.num_classes` also sets the teacher and the dataset.
//! Full-scale training runs 160k iterations at batch 16; the defaults here
//! are desk-scale.

use std::fmt::Write as _;
use std::str::FromStr;

use toml::{Table, Value};

use crate::alignment::{AlignmentConfig, Location, LossType};
use crate::error::{bail, Error, Result};
use crate::harness::{AblationSpec, SyntheticConfig, TrainConfig};
use crate::model::ModelConfig;
use crate::teacher::TeacherConfig;

const SECTIONS: [&str; 6] = ["model", "teacher", "data", "train", "align", "ablate"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: String,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub align_enabled: bool,
    pub ablate: AblationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::small_toy(6);
        RunConfig {
            variant: "S-toy".into(),
            teacher: TeacherConfig::toy(6),
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            align_enabled: false,
            ablate: AblationSpec {
                loss_types: vec![LossType::Cwd, LossType::Kl, LossType::L2],
                location_sets: vec![Location::ALL.to_vec()],
                weight_vectors: vec![[3.0, 15.0, 15.0, 15.0]],
            },
            model,
        }
    }
}

fn key_err(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn field<'a>(t: Option<&'a Table>, k: &str) -> Option<&'a Value> {
    t.and_then(|t| t.get(k))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(key_err(key, "a non-negative integer", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(key_err(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| key_err(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| key_err(key, "a string", v))
}

fn as_array<'a>(key: &str, v: &'a Value) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| key_err(key, "an array", v))
}

fn as_array4<T: Copy + Default>(key: &str, v: &Value, f: fn(&str, &Value) -> Result<T>) -> Result<[T; 4]> {
    let a = as_array(key, v)?;
    if a.len() != 4 {
        return Err(key_err(key, "an array of 4 values", v));
    }
    let mut out = [T::default(); 4];
    for (o, x) in out.iter_mut().zip(a) {
        *o = f(key, x)?;
    }
    Ok(out)
}

fn as_parsed<T: FromStr<Err = Error>>(key: &str, v: &Value) -> Result<T> {
    as_str(key, v)?.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

fn as_locations(key: &str, v: &Value) -> Result<Vec<Location>> {
    as_array(key, v)?.iter().map(|x| as_parsed(key, x)).collect()
}

/// Parses the right-hand side of an override as a TOML value; anything that
/// is not valid TOML is taken as a bare string.
pub fn parse_value(text: &str) -> Value {
    let text = text.trim();
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Applies `section.key=value` to a raw table.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, value)) = assignment.split_once('=') else {
        bail!(Config, "override {assignment:?} is not of the form section.key=value");
    };
    let key = key.trim();
    let Some((section, field)) = key.split_once('.') else {
        bail!(Config, "override key {key:?} must be section.key");
    };
    if field.is_empty() || field.contains('.') {
        bail!(Config, "override key {key:?} must be section.key");
    }
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        bail!(Config, "{section} is not a section");
    };
    t.insert(field.to_string(), parse_value(value));
    Ok(())
}

pub fn parse_table(text: &str) -> Result<Table> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {}", e.message().trim())))
}

impl RunConfig {
    /// Parses config text and applies overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(&table)
    }

    pub fn from_table(table: &Table) -> Result<Self> {
        let mut sections: Vec<(&str, &Table)> = Vec::new();
        for (name, v) in table {
            if !SECTIONS.contains(&name.as_str()) {
                bail!(Config, "unknown config section {name:?}");
            }
            let Value::Table(t) = v else {
                bail!(Config, "{name:?} must be a [section], not a top-level key");
            };
            sections.push((name, t));
        }
        let get = |s: &str| sections.iter().find(|(n, _)| *n == s).map(|(_, t)| *t);

        let mut cfg = RunConfig::default();
        let model = get("model");
        if let Some(v) = field(model, "num_classes") {
            let n = as_usize("model.num_classes", v)?;
            cfg.model.num_classes = n;
            cfg.teacher.num_classes = n;
            cfg.data.num_classes = n;
        }
        if let Some(v) = field(model, "variant") {
            cfg.variant = as_str("model.variant", v)?.to_string();
            cfg.model = ModelConfig::variant(&cfg.variant, cfg.model.num_classes)?;
        }

        for (section, t) in &sections {
            for (k, v) in t.iter() {
                let key = format!("{section}.{k}");
                let key = key.as_str();
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        if key == "align.enabled" {
            self.align_enabled = as_bool(key, v)?;
            return Ok(());
        }
        let (m, t, d, tr) = (&mut self.model, &mut self.teacher, &mut self.data, &mut self.train);
        let a = &mut tr.alignment;
        match key {
            "model.variant" | "model.num_classes" => {}
            "model.channels" => m.channels = as_array4(key, v, as_usize)?,
            "model.layers" => m.layers = as_array4(key, v, as_usize)?,
            "model.key_count" => m.key_count = as_usize(key, v)?,
            "model.kernel_size" => m.kernel_size = as_usize(key, v)?,
            "model.gdn_groups" => m.gdn_groups = as_usize(key, v)?,
            "model.decoder_width" => m.decoder_width = as_usize(key, v)?,
            "model.dappm_branch_width" => m.dappm_branch_width = as_usize(key, v)?,
            "model.aux_enabled" => m.aux_enabled = as_bool(key, v)?,
            "teacher.embed_dims" => t.embed_dims = as_array4(key, v, as_usize)?,
            "teacher.heads" => t.heads = as_array4(key, v, as_usize)?,
            "teacher.blocks" => t.blocks = as_array4(key, v, as_usize)?,
            "teacher.mlp_ratio" => t.mlp_ratio = as_usize(key, v)?,
            "teacher.decoder_embed" => t.decoder_embed = as_usize(key, v)?,
            "data.height" => d.height = as_usize(key, v)?,
            "data.width" => d.width = as_usize(key, v)?,
            "data.train_samples" => d.train_samples = as_usize(key, v)?,
            "data.val_samples" => d.val_samples = as_usize(key, v)?,
            "data.seed" => d.seed = as_u64(key, v)?,
            "data.max_shapes" => d.max_shapes = as_usize(key, v)?,
            "data.color_jitter" => d.color_jitter = as_f64(key, v)?,
            "data.noise" => d.noise = as_f64(key, v)?,
            "train.iterations" => tr.iterations = as_usize(key, v)?,
            "train.batch_size" => tr.batch_size = as_usize(key, v)?,
            "train.lr" => tr.lr = as_f64(key, v)?,
            "train.weight_decay" => tr.weight_decay = as_f64(key, v)?,
            "train.power" => tr.power = as_f64(key, v)?,
            "train.eval_interval" => tr.eval_interval = as_usize(key, v)?,
            "train.seed" => tr.seed = as_u64(key, v)?,
            "train.flip" => tr.flip = as_bool(key, v)?,
            "align.temperature" => a.temperature = as_f64(key, v)?,
            "align.locations" => a.locations = as_locations(key, v)?,
            "align.weights" => a.weights = as_array4(key, v, as_f64)?,
            "align.loss_type" => a.loss_type = as_parsed(key, v)?,
            "align.lambda_main" => a.lambda_main = as_f64(key, v)?,
            "align.lambda_aux" => a.lambda_aux = as_f64(key, v)?,
            "ablate.loss_types" => {
                self.ablate.loss_types = as_array(key, v)?.iter().map(|x| as_parsed(key, x)).collect::<Result<_>>()?
            }
            "ablate.location_sets" => {
                self.ablate.location_sets = as_array(key, v)?.iter().map(|x| as_locations(key, x)).collect::<Result<_>>()?
            }
            "ablate.weight_vectors" => {
                self.ablate.weight_vectors =
                    as_array(key, v)?.iter().map(|x| as_array4(key, x, as_f64)).collect::<Result<_>>()?
            }
            _ => bail!(Config, "unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Student training settings with alignment switched off unless
    /// `align.enabled` is set.
    pub fn student_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if !self.align_enabled {
            t.alignment = AlignmentConfig::disabled();
        }
        t
    }

    /// Checks everything except the dataset, which is validated when data is
    /// generated so that model-only commands accept any class count.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        self.train.validate()?;
        if self.teacher.num_classes != self.model.num_classes || self.data.num_classes != self.model.num_classes {
            bail!(Config, "model, teacher and data disagree on num_classes");
        }
        Ok(())
    }

    /// Serializes every key, so parsing the result reproduces `self`.
    pub fn to_toml(&self) -> String {
        fn arr<T: ToString>(xs: &[T]) -> String {
            format!("[{}]", xs.iter().map(T::to_string).collect::<Vec<_>>().join(", "))
        }
        fn f(x: f64) -> String {
            format!("{x:?}")
        }
        fn farr(xs: &[f64]) -> String {
            format!("[{}]", xs.iter().map(|x| f(*x)).collect::<Vec<_>>().join(", "))
        }
        fn locs(xs: &[Location]) -> String {
            format!("[{}]", xs.iter().map(|l| format!("\"{l}\"")).collect::<Vec<_>>().join(", "))
        }
        let (m, t, d, tr) = (&self.model, &self.teacher, &self.data, &self.train);
        let a = &tr.alignment;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "variant = {:?}", self.variant);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "channels = {}", arr(&m.channels));
        let _ = writeln!(s, "layers = {}", arr(&m.layers));
        let _ = writeln!(s, "key_count = {}", m.key_count);
        let _ = writeln!(s, "kernel_size = {}", m.kernel_size);
        let _ = writeln!(s, "gdn_groups = {}", m.gdn_groups);
        let _ = writeln!(s, "decoder_width = {}", m.decoder_width);
        let _ = writeln!(s, "dappm_branch_width = {}", m.dappm_branch_width);
        let _ = writeln!(s, "aux_enabled = {}", m.aux_enabled);
        let _ = writeln!(s, "\n[teacher]");
        let _ = writeln!(s, "embed_dims = {}", arr(&t.embed_dims));
        let _ = writeln!(s, "heads = {}", arr(&t.heads));
        let _ = writeln!(s, "blocks = {}", arr(&t.blocks));
        let _ = writeln!(s, "mlp_ratio = {}", t.mlp_ratio);
        let _ = writeln!(s, "decoder_embed = {}", t.decoder_embed);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "height = {}", d.height);
        let _ = writeln!(s, "width = {}", d.width);
        let _ = writeln!(s, "train_samples = {}", d.train_samples);
        let _ = writeln!(s, "val_samples = {}", d.val_samples);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "max_shapes = {}", d.max_shapes);
        let _ = writeln!(s, "color_jitter = {}", f(d.color_jitter));
        let _ = writeln!(s, "noise = {}", f(d.noise));
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "iterations = {}", tr.iterations);
        let _ = writeln!(s, "batch_size = {}", tr.batch_size);
        let _ = writeln!(s, "lr = {}", f(tr.lr));
        let _ = writeln!(s, "weight_decay = {}", f(tr.weight_decay));
        let _ = writeln!(s, "power = {}", f(tr.power));
        let _ = writeln!(s, "eval_interval = {}", tr.eval_interval);
        let _ = writeln!(s, "seed = {}", tr.seed);
        let _ = writeln!(s, "flip = {}", tr.flip);
        let _ = writeln!(s, "\n[align]");
        let _ = writeln!(s, "enabled = {}", self.align_enabled);
        let _ = writeln!(s, "temperature = {}", f(a.temperature));
        let _ = writeln!(s, "locations = {}", locs(&a.locations));
        let _ = writeln!(s, "weights = {}", farr(&a.weights));
        let _ = writeln!(s, "loss_type = \"{}\"", a.loss_type);
        let _ = writeln!(s, "lambda_main = {}", f(a.lambda_main));
        let _ = writeln!(s, "lambda_aux = {}", f(a.lambda_aux));
        let _ = writeln!(s, "\n[ablate]");
        let lt: Vec<String> = self.ablate.loss_types.iter().map(|l| format!("\"{l}\"")).collect();
        let _ = writeln!(s, "loss_types = [{}]", lt.join(", "));
        let ls: Vec<String> = self.ablate.location_sets.iter().map(|l| locs(l)).collect();
        let _ = writeln!(s, "location_sets = [{}]", ls.join(", "));
        let ws: Vec<String> = self.ablate.weight_vectors.iter().map(|w| farr(w)).collect();
        let _ = writeln!(s, "weight_vectors = [{}]", ws.join(", "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn to_toml_round_trips() {
        let mut c = RunConfig::parse("[model]\nvariant = \"S\"\nnum_classes = 5\nkernel_size = 5\n", &[]).unwrap();
        c.train.alignment.locations = vec![Location::Stage3, Location::Logits];
        c.ablate.location_sets.push(vec![]);
        c.train.lr = 1.0 / 3.0;
        c.align_enabled = true;
        let back = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn variant_then_explicit_keys() {
        let c = RunConfig::parse("[model]\nkernel_size = 3\nvariant = \"B\"\nnum_classes = 19\n", &[]).unwrap();
        assert_eq!(c.model.channels, [64, 128, 256, 512]);
        assert_eq!(c.model.kernel_size, 3);
        assert_eq!(c.model.num_classes, 19);
        assert_eq!(c.teacher.num_classes, 19);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = vec!["train.lr=0.01".to_string(), "align.loss_type = kl".into(), "train.lr=2e-3".into()];
        let c = RunConfig::parse("[train]\nlr = 0.5\n", &sets).unwrap();
        assert_eq!(c.train.lr, 2e-3);
        assert_eq!(c.train.alignment.loss_type, LossType::Kl);
        let c = RunConfig::parse("", &["align.locations=[\"logits\"]".into()]).unwrap();
        assert_eq!(c.train.alignment.locations, vec![Location::Logits]);
    }

    #[test]
    fn unknown_keys_are_errors_naming_the_key() {
        for (text, sets, token) in [
            ("[model]\nkernal_size = 3\n", vec![], "model.kernal_size"),
            ("[modle]\n", vec![], "modle"),
            ("seed = 3\n", vec![], "seed"),
            ("", vec!["train.itrs=4".to_string()], "train.itrs"),
            ("", vec!["nodot=4".to_string()], "nodot"),
        ] {
            let err = RunConfig::parse(text, &sets).unwrap_err();
            assert!(err.is_validation());
            assert!(err.to_string().contains(token), "{err}");
        }
    }

    #[test]
    fn type_and_value_errors() {
        assert!(RunConfig::parse("[train]\nlr = \"fast\"\n", &[]).is_err());
        assert!(RunConfig::parse("[model]\nkernel_size = 4\n", &[]).is_err());
        assert!(RunConfig::parse("[model]\nchannels = [1, 2]\n", &[]).is_err());
        assert!(RunConfig::parse("[model]\nvariant = \"XL\"\n", &[]).is_err());
        assert!(RunConfig::parse("[train\n", &[]).is_err());
        assert!(RunConfig::parse("[train]\niterations = -1\n", &[]).is_err());
    }

    #[test]
    fn alignment_off_unless_enabled() {
        let c = RunConfig::default();
        assert!(!c.student_train().alignment.needs_teacher());
        let c = RunConfig::parse("", &["align.enabled=true".into()]).unwrap();
        assert_eq!(c.student_train().alignment, AlignmentConfig::default());
    }

    #[test]
    fn comments_allowed() {
        let c = RunConfig::parse("# run\n[train] # section\niterations = 10 # short\n", &[]).unwrap();
        assert_eq!(c.train.iterations, 10);
    }

    #[test]
    fn override_values_fall_back_to_strings() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("S-toy"), Value::String("S-toy".into()));
        assert_eq!(parse_value("\"B\""), Value::String("B".into()));
    }
}
