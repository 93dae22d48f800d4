//! Named parameter storage, initialization, and the versioned checkpoint
//! container (magic `SDCK`).

use std::fs;
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::ModelConfig;
use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Graph, Tensor};

/// One named tensor: trainable parameter or persistent buffer (running
/// statistics).
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Rc<ArrayD<T>>,
    pub trainable: bool,
}

/// Ordered map of named tensors. Insertion order is part of the contract:
/// checkpoints store tensors in this order and initialization draws follow
/// it.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Scalar> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> Result<()> {
        if self
            .entries
            .insert(
                name.to_string(),
                ParamEntry {
                    value: Rc::new(value),
                    trainable,
                },
            )
            .is_some()
        {
            return Err(CoreError::validation(format!(
                "duplicate parameter name {name}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::validation(format!("unknown parameter {name}")))
    }

    /// Replace a tensor's value (optimizer steps, running-statistic updates).
    /// The shape must be unchanged.
    pub fn set_value(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::validation(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(CoreError::validation(format!(
                "shape mismatch writing {name}: {:?} vs {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Rc::new(value);
        Ok(())
    }

    /// Mutable access to a tensor's storage, cloning only if the value is
    /// still shared with a live graph.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::validation(format!("unknown parameter {name}")))?;
        Ok(Rc::make_mut(&mut entry.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, optionally restricted to trainable tensors.
    pub fn n_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Register the named tensor on `graph` as a differentiable leaf.
    pub fn leaf(&self, graph: &Graph<T>, name: &str) -> Result<Tensor<T>> {
        Ok(graph.param(name, Rc::clone(&self.get(name)?.value)))
    }

    /// Register the named tensor on `graph` as a non-differentiable input.
    pub fn frozen(&self, graph: &Graph<T>, name: &str) -> Result<Tensor<T>> {
        Ok(graph.constant_shared(Rc::clone(&self.get(name)?.value)))
    }

    /// Convert every tensor to another scalar type (f32 <-> f64), e.g. for
    /// double-precision gradient checks.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, entry) in &self.entries {
            let value = entry.value.mapv(|v| U::from_f64x(v.to_f64x()));
            out.entries.insert(
                name.clone(),
                ParamEntry {
                    value: Rc::new(value),
                    trainable: entry.trainable,
                },
            );
        }
        out
    }
}

// ------------------------------------------------------------ initialization

/// Build a freshly initialized parameter set for the encoder, the projection
/// head and, when `n_classes` is given, the classification head.
///
/// Weights draw from normal(0, 0.02); biases start at zero; normalization
/// gains at one; the positional convolution's per-tap gains start at the
/// norms of their direction slices so the effective kernel initially equals
/// the direction tensor. Draws consume `rng` sequentially in insertion
/// order, so a fixed seed yields identical backbones regardless of the
/// optional head.
pub fn init_params<T: Scalar>(
    config: &ModelConfig,
    n_classes: Option<usize>,
    rng: &mut RngStream,
) -> Result<ParameterStore<T>> {
    config.validate()?;
    let f = config.conv_channels;
    let d = config.embed_dim;
    let k = config.pos_conv_kernel;
    let in_per_group = d / config.pos_conv_groups;
    let mut store = ParameterStore::new();

    let normal = |shape: &[usize], rng: &mut RngStream| -> ArrayD<T> {
        let mut a = ArrayD::<T>::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = T::from_f64x(rng.normal(0.0, 0.02));
        }
        a
    };
    let zeros = |shape: &[usize]| ArrayD::<T>::zeros(IxDyn(shape));
    let ones = |shape: &[usize]| ArrayD::<T>::from_elem(IxDyn(shape), T::one());

    store.insert("conv1.weight", normal(&[f, 1, 2], rng), true)?;
    store.insert("gn1.gamma", ones(&[f]), true)?;
    store.insert("gn1.beta", zeros(&[f]), true)?;
    for i in 2..=4 {
        store.insert(&format!("conv{i}.weight"), normal(&[f, f, 2], rng), true)?;
    }
    store.insert("pre_ln.gamma", ones(&[f]), true)?;
    store.insert("pre_ln.beta", zeros(&[f]), true)?;
    store.insert("embed.weight", normal(&[d, f], rng), true)?;
    store.insert("embed.bias", zeros(&[d]), true)?;

    let v = normal(&[d, in_per_group, k], rng);
    let mut g = ArrayD::<T>::zeros(IxDyn(&[k]));
    for ki in 0..k {
        let ssq = v
            .slice(ndarray::s![.., .., ki])
            .iter()
            .fold(T::zero(), |a, &x| a + x * x);
        g[ki] = ssq.sqrt();
    }
    store.insert("pos_conv.v", v, true)?;
    store.insert("pos_conv.g", g, true)?;
    store.insert("pos_conv.bias", zeros(&[d]), true)?;
    store.insert("pos_ln.gamma", ones(&[d]), true)?;
    store.insert("pos_ln.beta", zeros(&[d]), true)?;

    for b in 0..config.n_blocks {
        for proj in ["q", "k", "v", "out"] {
            store.insert(
                &format!("block{b}.attn.{proj}.weight"),
                normal(&[d, d], rng),
                true,
            )?;
            store.insert(&format!("block{b}.attn.{proj}.bias"), zeros(&[d]), true)?;
        }
        store.insert(&format!("block{b}.attn_ln.gamma"), ones(&[d]), true)?;
        store.insert(&format!("block{b}.attn_ln.beta"), zeros(&[d]), true)?;
        store.insert(
            &format!("block{b}.ffn.w1.weight"),
            normal(&[config.ffn_dim, d], rng),
            true,
        )?;
        store.insert(&format!("block{b}.ffn.w1.bias"), zeros(&[config.ffn_dim]), true)?;
        store.insert(
            &format!("block{b}.ffn.w2.weight"),
            normal(&[d, config.ffn_dim], rng),
            true,
        )?;
        store.insert(&format!("block{b}.ffn.w2.bias"), zeros(&[d]), true)?;
        store.insert(&format!("block{b}.ffn_ln.gamma"), ones(&[d]), true)?;
        store.insert(&format!("block{b}.ffn_ln.beta"), zeros(&[d]), true)?;
    }

    store.insert("project.weight", normal(&[config.proj_dim, d], rng), true)?;
    store.insert("project.bias", zeros(&[config.proj_dim]), true)?;
    store.insert("project_bn.gamma", ones(&[config.proj_dim]), true)?;
    store.insert("project_bn.beta", zeros(&[config.proj_dim]), true)?;
    store.insert("project_bn.running_mean", zeros(&[config.proj_dim]), false)?;
    store.insert("project_bn.running_var", ones(&[config.proj_dim]), false)?;

    if let Some(classes) = n_classes {
        if classes == 0 {
            return Err(CoreError::validation("n_classes must be positive".to_string()));
        }
        store.insert("classify.weight", normal(&[classes, d], rng), true)?;
        store.insert("classify.bias", zeros(&[classes]), true)?;
    }
    Ok(store)
}

// --------------------------------------------------------------- checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
}

fn write_array<T: Scalar>(out: &mut Vec<u8>, a: &ArrayD<T>) {
    for &v in a.iter() {
        v.write_le(out);
    }
}

fn read_array<T: Scalar>(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<T>> {
    let n: usize = shape.iter().product();
    let width = std::mem::size_of::<T>();
    let end = *offset + n * width;
    if end > bytes.len() {
        return Err(CoreError::validation(
            "checkpoint truncated inside tensor data".to_string(),
        ));
    }
    let mut a = ArrayD::<T>::zeros(IxDyn(shape));
    for (i, v) in a.iter_mut().enumerate() {
        let at = *offset + i * width;
        *v = T::read_le(&bytes[at..at + width]);
    }
    *offset = end;
    Ok(a)
}

/// Serialize the parameter set (and optionally Adam state) with a config
/// echo. The write is atomic: a temp file in the target directory is synced
/// and renamed into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParameterStore<T>,
    config_echo: &serde_json::Value,
    optimizer: Option<&AdamState<T>>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: config_echo.clone(),
        tensors: store
            .iter()
            .map(|(name, e)| TensorMeta {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        optimizer_step: optimizer.map(|o| o.step_count()),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match T::DTYPE {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    });
    out.push(optimizer.is_some() as u8);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, e) in store.iter() {
        write_array(&mut out, &e.value);
    }
    if let Some(opt) = optimizer {
        for (name, e) in store.iter() {
            if e.trainable {
                let (m, v) = opt.moments(name).ok_or_else(|| {
                    CoreError::validation(format!("optimizer state missing for {name}"))
                })?;
                write_array(&mut out, m);
                write_array(&mut out, v);
            }
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.to_path_buf(), e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| CoreError::io(tmp.clone(), e))?;
    let f = fs::File::open(&tmp).map_err(|e| CoreError::io(tmp.clone(), e))?;
    f.sync_all().map_err(|e| CoreError::io(tmp.clone(), e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    Ok(())
}

/// Read back a checkpoint written by [`save_checkpoint`]; the scalar type
/// must match the stored dtype.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ParameterStore<T>, serde_json::Value, Option<AdamState<T>>)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.to_path_buf(), e))?;
    let fail = |reason: &str| CoreError::format(path.to_path_buf(), reason.to_string());
    if bytes.len() < 12 {
        return Err(fail("file shorter than the checkpoint header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic (not a checkpoint file)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let dtype = bytes[6];
    let expected = match T::DTYPE {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    };
    if dtype != expected {
        return Err(fail(&format!(
            "dtype mismatch: file stores {}, caller expects {}",
            if dtype == 0 { "f32" } else { "f64" },
            if expected == 0 { "f32" } else { "f64" },
        )));
    }
    let has_optimizer = bytes[7] & 1 != 0;
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if 12 + header_len > bytes.len() {
        return Err(fail("checkpoint truncated inside header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;

    let mut offset = 12 + header_len;
    let mut store = ParameterStore::new();
    for meta in &header.tensors {
        let a = read_array::<T>(&bytes, &mut offset, &meta.shape)?;
        store.insert(&meta.name, a, meta.trainable)?;
    }
    let optimizer = if has_optimizer {
        let step = header
            .optimizer_step
            .ok_or_else(|| fail("optimizer flag set but header lacks the step count"))?;
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for meta in &header.tensors {
            if meta.trainable {
                m.insert(meta.name.clone(), read_array::<T>(&bytes, &mut offset, &meta.shape)?);
                v.insert(meta.name.clone(), read_array::<T>(&bytes, &mut offset, &meta.shape)?);
            }
        }
        Some(AdamState::restore(m, v, step))
    } else {
        None
    };
    if offset != bytes.len() {
        return Err(fail("trailing bytes after checkpoint payload"));
    }
    Ok((store, header.config, optimizer))
}
