//! Single-file checkpoints: named parameter, buffer and optimizer arrays in
//! safetensors layout, with the network config and training cursor stored
//! as JSON metadata.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::ClassMap;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::network::{NetworkConfig, REFERENCE_PARAMETER_COUNT};
use crate::nn::Parameterized;
use crate::optim::{RmsProp, RmsPropConfig};
use crate::preprocess::PreprocessConfig;
use crate::trainer::{StepRecord, TrainState};

pub const FORMAT_VERSION: u32 = 1;

const META_KEY: &str = "pipofan";
const OPT_PREFIX: &str = "optim.square_avg.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: usize,
    pub cursor: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    /// Stored as a string since JSON numbers cannot hold a u128.
    pub rng_word_pos: String,
    pub optimizer: RmsPropConfig,
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: Option<TrainMeta>,
    #[serde(default)]
    pub classes: Option<ClassMap>,
    /// Preprocessing the model was trained with.
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    /// Resolved experiment config as TOML, kept for provenance.
    #[serde(default)]
    pub experiment: Option<String>,
}

/// Optional metadata stored alongside the tensors.
#[derive(Clone, Debug, Default)]
pub struct SaveOptions {
    pub classes: Option<ClassMap>,
    pub preprocess: Option<PreprocessConfig>,
    pub experiment: Option<String>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn to_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(shape: &[usize], data: &[u8]) -> ArrayD<f32> {
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape matches data")
}

/// Writes the model, and optionally the full training state.
pub fn save(path: &Path, state_or_model: Saveable<'_>, options: &SaveOptions) -> Result<()> {
    let (model, train) = match state_or_model {
        Saveable::Model(m) => (m, None),
        Saveable::State(s) => (&s.model, Some(s)),
    };
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        tensors.push((name.to_string(), p.value.shape().to_vec(), to_bytes(&p.value)))
    });
    model.visit_buffers("", &mut |name, b| {
        let d = b.clone().into_dyn();
        tensors.push((name.to_string(), d.shape().to_vec(), to_bytes(&d)))
    });
    let train_meta = train.map(|s| {
        for (name, v) in &s.optimizer.square_avg {
            tensors.push((format!("{OPT_PREFIX}{name}"), v.shape().to_vec(), to_bytes(v)));
        }
        TrainMeta {
            step: s.step,
            cursor: s.cursor,
            rng_seed: s.rng.get_seed(),
            rng_stream: s.rng.get_stream(),
            rng_word_pos: s.rng.get_word_pos().to_string(),
            optimizer: s.optimizer.config,
            history: s.history.clone(),
        }
    });
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        network: model.config().clone(),
        train: train_meta,
        classes: options.classes.clone(),
        preprocess: options.preprocess.clone(),
        experiment: options.experiment.clone(),
    };
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("meta serializes"))]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub enum Saveable<'a> {
    Model(&'a Model<f32>),
    State(&'a TrainState),
}

struct Loaded {
    bytes: Vec<u8>,
    meta: CheckpointMeta,
}

fn read(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| ckpt_err(path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {}", meta.format_version)));
    }
    Ok(Loaded { bytes, meta })
}

fn fill_model(path: &Path, tensors: &SafeTensors<'_>, model: &mut Model<f32>) -> Result<()> {
    let mut failure: Option<Error> = None;
    let mut fetch = |name: &str, shape: &[usize]| -> Option<ArrayD<f32>> {
        match tensors.tensor(name) {
            Ok(t) if t.shape() == shape && t.dtype() == Dtype::F32 => Some(from_bytes(t.shape(), t.data())),
            Ok(t) => {
                failure.get_or_insert(ckpt_err(path, format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
                None
            }
            Err(_) => {
                failure.get_or_insert(ckpt_err(path, format!("missing tensor `{name}`")));
                None
            }
        }
    };
    model.visit_params_mut("", &mut |name, p| {
        if let Some(v) = fetch(name, p.value.shape()) {
            p.value = v;
        }
    });
    model.visit_buffers_mut("", &mut |name, b| {
        if let Some(v) = fetch(name, &[b.len()]) {
            b.assign(&v.into_dimensionality::<ndarray::Ix1>().expect("1-D"));
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Loads the model weights and metadata.
pub fn load_model(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let loaded = read(path)?;
    let tensors = SafeTensors::deserialize(&loaded.bytes).map_err(|e| ckpt_err(path, e))?;
    let mut model = Model::new(loaded.meta.network.clone())?;
    fill_model(path, &tensors, &mut model)?;
    Ok((model, loaded.meta))
}

/// Restores a complete training state written from a [`TrainState`].
pub fn load_state(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let loaded = read(path)?;
    let tensors = SafeTensors::deserialize(&loaded.bytes).map_err(|e| ckpt_err(path, e))?;
    let mut model = Model::new(loaded.meta.network.clone())?;
    fill_model(path, &tensors, &mut model)?;
    let train = loaded
        .meta
        .train
        .clone()
        .ok_or_else(|| ckpt_err(path, "checkpoint holds no training state"))?;
    let mut optimizer = RmsProp::new(train.optimizer, &model);
    for (name, v) in &mut optimizer.square_avg {
        let t = tensors
            .tensor(&format!("{OPT_PREFIX}{name}"))
            .map_err(|_| ckpt_err(path, format!("missing optimizer state for `{name}`")))?;
        *v = from_bytes(t.shape(), t.data());
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(train.rng_seed);
    rng.set_stream(train.rng_stream);
    let word_pos: u128 = train
        .rng_word_pos
        .parse()
        .map_err(|e| ckpt_err(path, format!("bad rng position: {e}")))?;
    rng.set_word_pos(word_pos);
    Ok((
        TrainState {
            step: train.step,
            model,
            optimizer,
            rng,
            cursor: train.cursor,
            history: train.history,
        },
        loaded.meta,
    ))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// For the default five-scale widths, the trainable parameter count and the
/// published reference count when they differ.
pub fn reference_count_mismatch(model: &Model<f32>) -> Option<(usize, usize)> {
    let default = NetworkConfig {
        class_count: model.config().class_count,
        block_type: model.config().block_type,
        input_channels: model.config().input_channels,
        ..NetworkConfig::default()
    };
    if model.config() != &default {
        return None;
    }
    let ours = model.num_parameters();
    (ours != REFERENCE_PARAMETER_COUNT).then_some((ours, REFERENCE_PARAMETER_COUNT))
}
