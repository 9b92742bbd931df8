//! Checkpoints: a tensor container with every layer's state plus a JSON
//! sidecar (`<path>.json`) carrying the config, progress and RNG position.
//!
//! Per parametric layer, in order: weight, mask, momentum, bias, bias
//! momentum.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Layer, Params, ToyModel};
use super::{MetricsRow, Trainer, TrainingConfig};
use crate::container::{self, TensorRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resumable position of the shuffling RNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    pub epochs_completed: usize,
    pub rng: RngState,
    /// Layer names in order, for tools that only read the sidecar.
    pub layers: Vec<String>,
    pub metrics: Vec<MetricsRow>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn records<W: Tensor>(p: &Params<W>, out: &mut Vec<TensorRecord>) {
    let dims = p.weight.shape();
    out.push(TensorRecord {
        dims: dims.clone(),
        data: p.weight.values().to_vec(),
    });
    out.push(TensorRecord::from_mask(&p.mask));
    out.push(TensorRecord {
        dims,
        data: p.momentum.clone(),
    });
    out.push(TensorRecord {
        dims: vec![p.bias.len()],
        data: p.bias.clone(),
    });
    out.push(TensorRecord {
        dims: vec![p.bias_momentum.len()],
        data: p.bias_momentum.clone(),
    });
}

/// Tensor records of every parametric layer of `model`.
pub fn model_records(model: &ToyModel) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::Conv(p) => records(p, &mut out),
            Layer::Fc(p) => records(p, &mut out),
            _ => {}
        }
    }
    out
}

/// Write the model state and sidecar of `trainer` to `path`.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    container::write_file(path, &model_records(trainer.model()))?;
    let meta = CheckpointMeta {
        config: trainer.config().clone(),
        epochs_completed: trainer.epoch(),
        rng: RngState::capture(trainer.rng()),
        layers: trainer.model().layers().iter().map(|l| l.name().to_string()).collect(),
        metrics: trainer.metrics().to_vec(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

fn restore<W: Tensor>(p: &mut Params<W>, recs: &mut impl Iterator<Item = TensorRecord>) -> Result<()> {
    let mut next = |what: &str| {
        recs.next()
            .ok_or_else(|| Error::format(format!("checkpoint ends before {what}")))
    };
    let shape = p.weight.shape();
    let check = |rec: &TensorRecord, dims: &[usize], what: &str| {
        if rec.dims != dims {
            return Err(Error::format(format!(
                "{what} has dims {:?}, expected {dims:?}",
                rec.dims
            )));
        }
        Ok(())
    };

    let w = next("weight")?;
    check(&w, &shape, "weight")?;
    let m = next("mask")?;
    check(&m, &shape, "mask")?;
    let v = next("momentum")?;
    check(&v, &shape, "momentum")?;
    let b = next("bias")?;
    check(&b, &[p.bias.len()], "bias")?;
    let bv = next("bias momentum")?;
    check(&bv, &[p.bias.len()], "bias momentum")?;

    if let Some(i) = w.data.iter().chain(&v.data).chain(&b.data).chain(&bv.data).position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    p.weight = p.weight.with_values(w.data);
    p.mask = m.to_mask()?;
    p.momentum = v.data;
    p.bias = b.data;
    p.bias_momentum = bv.data;
    Ok(())
}

/// Read a checkpoint back into a model built from its sidecar config.
pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: side, source: e })?;
    meta.config.validate()?;

    let ds = &meta.config.dataset;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = ToyModel::new(&meta.config.model, ds.channels, ds.image_size, ds.n_classes, &mut rng)?;
    let mut recs = container::read_file(path)?.into_iter();
    for layer in model.layers_mut() {
        match layer {
            Layer::Conv(p) => restore(p, &mut recs)?,
            Layer::Fc(p) => restore(p, &mut recs)?,
            _ => {}
        }
    }
    if recs.next().is_some() {
        return Err(Error::format("checkpoint holds more tensors than the model"));
    }
    Ok((model, meta))
}

/// One row per parametric layer: name, dims, mask sparsity and measured
/// weight sparsity. Works from the container alone.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub index: usize,
    pub dims: Vec<usize>,
    pub mask_sparsity: f64,
    pub weight_sparsity: f64,
}

pub fn inspect_records(recs: &[TensorRecord]) -> Result<Vec<LayerReport>> {
    if !recs.len().is_multiple_of(5) {
        return Err(Error::format(format!(
            "expected 5 tensors per layer, found {} tensors",
            recs.len()
        )));
    }
    recs.chunks_exact(5)
        .enumerate()
        .map(|(index, group)| {
            let mask = group[1].to_mask()?;
            if group[0].dims != group[1].dims {
                return Err(Error::format(format!("layer {index}: weight and mask dims differ")));
            }
            let weights = &group[0].data;
            let zeros = weights.iter().filter(|&&v| v == 0.0).count();
            Ok(LayerReport {
                index,
                dims: group[0].dims.clone(),
                mask_sparsity: mask.zero_fraction(),
                weight_sparsity: zeros as f64 / weights.len().max(1) as f64,
            })
        })
        .collect()
}
