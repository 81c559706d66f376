//! Parameter checkpoints and training-state files on top of the container.

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::io::container::{Container, Entry, TensorData};
use crate::io::{read_file, write_atomic};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::param::{is_buffer_name, ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const CONFIG_KEY: &str = "__config__";
pub const SEED_KEY: &str = "__seed__";
pub const KIND_KEY: &str = "__kind__";
pub const VERSION_KEY: &str = "__format_version__";
const STEP_KEY: &str = "__adam_step__";
const ADAM_KEY: &str = "__adam__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// What the checkpoint holds, e.g. `student` or `teacher`.
    pub kind: String,
    /// Effective run configuration as TOML text.
    pub config: String,
    pub seed: u64,
}

fn is_meta(name: &str) -> bool {
    name.starts_with("__") && name.ends_with("__")
}

fn tensor_entry<S: Scalar>(name: &str, t: &Tensor<S>) -> Entry {
    let dims = t.shape().0.iter().map(|&d| d as u32).collect();
    let data = match S::DTYPE {
        DType::F32 => TensorData::F32(t.data().iter().map(|v| Scalar::to_f64(*v) as f32).collect()),
        DType::F64 => TensorData::F64(t.data().iter().map(|v| Scalar::to_f64(*v)).collect()),
    };
    Entry { name: name.to_string(), dims, data }
}

fn entry_tensor<S: Scalar>(e: &Entry) -> Result<Tensor<S>> {
    if e.dims.len() != 4 {
        bail!(Data, "entry {:?} has rank {}, parameters are rank 4", e.name, e.dims.len());
    }
    let shape = Shape::new(e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize, e.dims[3] as usize);
    let data: Vec<S> = match (&e.data, S::DTYPE) {
        (TensorData::F32(v), DType::F32) => v.iter().map(|&x| S::from_f64(x as f64)).collect(),
        (TensorData::F64(v), DType::F64) => v.iter().map(|&x| S::from_f64(x)).collect(),
        (d, want) => bail!(Data, "entry {:?} holds {} data but {want} was requested", e.name, d.type_name()),
    };
    Tensor::from_vec(shape, data)
}

fn push_meta(c: &mut Container, meta: &CheckpointMeta) -> Result<()> {
    c.push(Entry::text(VERSION_KEY, "1"))?;
    c.push(Entry::text(KIND_KEY, &meta.kind))?;
    c.push(Entry::text(SEED_KEY, &meta.seed.to_string()))?;
    c.push(Entry::text(CONFIG_KEY, &meta.config))
}

fn read_meta(c: &Container) -> Result<CheckpointMeta> {
    let text = |k: &str| -> Result<String> {
        c.get(k).ok_or_else(|| Error::Data(format!("checkpoint lacks metadata entry {k}")))?.as_text().map(str::to_string)
    };
    let version = text(VERSION_KEY)?;
    if version != "1" {
        bail!(Data, "unsupported checkpoint version {version:?} (this build reads version 1)");
    }
    let seed = text(SEED_KEY)?;
    let seed = seed.parse().map_err(|_| Error::Data(format!("bad seed entry {seed:?}")))?;
    Ok(CheckpointMeta { kind: text(KIND_KEY)?, config: text(CONFIG_KEY)?, seed })
}

/// Element type of the parameter entries, `None` if there are none.
pub fn checkpoint_dtype(c: &Container) -> Option<DType> {
    c.entries.iter().filter(|e| !is_meta(&e.name)).find_map(|e| match e.data {
        TensorData::F32(_) => Some(DType::F32),
        TensorData::F64(_) => Some(DType::F64),
        _ => None,
    })
}

pub fn checkpoint_to_container<S: Scalar>(params: &ParamStore<S>, meta: &CheckpointMeta) -> Result<Container> {
    let mut c = Container::new();
    push_meta(&mut c, meta)?;
    for p in params.iter() {
        if is_meta(&p.name) {
            bail!(Data, "parameter name {:?} collides with metadata", p.name);
        }
        c.push(tensor_entry(&p.name, &p.value))?;
    }
    Ok(c)
}

/// Rebuilds parameters in file order; buffers are recognized by name and
/// every weight comes back trainable.
pub fn checkpoint_from_container<S: Scalar>(c: &Container) -> Result<(ParamStore<S>, CheckpointMeta)> {
    let meta = read_meta(c)?;
    if let Some(dt) = checkpoint_dtype(c) {
        if dt != S::DTYPE {
            bail!(Data, "checkpoint stores {dt} parameters and can only be loaded in {dt} mode, not {}", S::DTYPE);
        }
    }
    let mut store = ParamStore::new();
    for e in c.entries.iter().filter(|e| !is_meta(&e.name)) {
        let kind = if is_buffer_name(&e.name) { ParamKind::Buffer } else { ParamKind::Weight };
        store.insert(e.name.clone(), entry_tensor(e)?, kind)?;
    }
    Ok((store, meta))
}

pub fn save_checkpoint<S: Scalar>(params: &ParamStore<S>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_container(params, meta)?.to_bytes())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, CheckpointMeta)> {
    checkpoint_from_container(&Container::parse(&read_file(path)?)?)
}

/// Everything needed to resume a student run beyond its inference
/// checkpoint: training-only parameters and the optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainingState<S: Scalar> {
    pub extra: ParamStore<S>,
    pub optimizer: OptimizerState<S>,
}

pub fn training_state_to_container<S: Scalar>(state: &TrainingState<S>, meta: &CheckpointMeta) -> Result<Container> {
    let mut c = checkpoint_to_container(&state.extra, meta)?;
    let o = &state.optimizer;
    c.push(Entry::text(STEP_KEY, &o.step.to_string()))?;
    let cfg = format!("{} {} {} {}", o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay);
    c.push(Entry::text(ADAM_KEY, &cfg))?;
    for (i, name) in o.names.iter().enumerate() {
        c.push(tensor_entry(&format!("__m__{name}"), &o.m[i]))?;
        c.push(tensor_entry(&format!("__v__{name}"), &o.v[i]))?;
    }
    Ok(c)
}

pub fn training_state_from_container<S: Scalar>(c: &Container) -> Result<(TrainingState<S>, CheckpointMeta)> {
    let mut params = Container::new();
    let mut moments = Vec::new();
    for e in &c.entries {
        if let Some(name) = e.name.strip_prefix("__m__") {
            moments.push(name.to_string());
        } else if !e.name.starts_with("__v__") && e.name != STEP_KEY && e.name != ADAM_KEY {
            params.entries.push(e.clone());
        }
    }
    let (extra, meta) = checkpoint_from_container(&params)?;
    let text = |k: &str| -> Result<&str> { c.get(k).ok_or_else(|| Error::Data(format!("training state lacks {k}")))?.as_text() };
    let step = text(STEP_KEY)?;
    let step = step.parse().map_err(|_| Error::Data(format!("bad optimizer step {step:?}")))?;
    let hyper: Vec<f64> = text(ADAM_KEY)?.split(' ').map(str::parse).collect::<Result<_, _>>().map_err(|_| Error::Data("bad optimizer hyperparameters".into()))?;
    let [beta1, beta2, eps, weight_decay] = hyper[..] else {
        bail!(Data, "expected 4 optimizer hyperparameters, found {}", hyper.len());
    };
    let mut m = Vec::with_capacity(moments.len());
    let mut v = Vec::with_capacity(moments.len());
    for name in &moments {
        let get = |p: &str| c.get(&format!("{p}{name}")).ok_or_else(|| Error::Data(format!("missing {p}{name}")));
        m.push(entry_tensor(get("__m__")?)?);
        v.push(entry_tensor(get("__v__")?)?);
    }
    let optimizer = OptimizerState { config: AdamWConfig { beta1, beta2, eps, weight_decay }, step, names: moments, m, v };
    Ok((TrainingState { extra, optimizer }, meta))
}

pub fn save_training_state<S: Scalar>(state: &TrainingState<S>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &training_state_to_container(state, meta)?.to_bytes())
}

pub fn load_training_state<S: Scalar>(path: &Path) -> Result<(TrainingState<S>, CheckpointMeta)> {
    training_state_from_container(&Container::parse(&read_file(path)?)?)
}
