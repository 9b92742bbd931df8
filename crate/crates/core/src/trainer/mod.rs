//! Sparse training: dense warm-up, per-batch mask re-evaluation during the
//! pruning era, and a frozen mask afterwards.

mod checkpoint;
mod data;
mod model;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    inspect_records, load_checkpoint, model_records, save_checkpoint, sidecar_path, CheckpointMeta,
    LayerReport, RngState,
};
pub use data::{make_synthetic_dataset, Dataset, SyntheticSpec, PIXEL_RANGE};
pub use model::{
    softmax_cross_entropy, ActShape, Gradients, Layer, ModelSpec, ParamGrad, Params, ToyModel,
};

use crate::error::{Error, Result};
use crate::masking::{
    ck_mask, column_coverage_violations, combined_mask, conv_driven_fc_elimination,
    ensure_column_coverage, fc_block_mask_unrepaired, monotone_and, window_mask,
};
use crate::schedule::{Granularity, Phase, PruningSchedule};
use crate::tensor::{apply_mask, ConvWeight, PruneMask};

fn default_lr_drop_factor() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    pub schedule: PruningSchedule,
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub model: ModelSpec,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::config(format!(
                "lr_drop_factor must lie in (0, 1), got {}",
                self.lr_drop_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        self.schedule.validate()?;
        self.dataset.validate()?;
        Ok(())
    }

    /// Whether the pruning era ends within the configured epochs.
    pub fn era_fits(&self) -> bool {
        self.schedule.freeze_epoch() <= self.epochs
    }

    /// Learning rate for `epoch`: `lr0` times the drop factor once for every
    /// drop epoch already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr0 * self.lr_drop_factor.powi(drops as i32)
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub top1: f64,
    pub loss: f64,
    pub sparsity: f64,
    pub lr: f64,
    pub phase: Phase,
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in data.batches(256) {
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn conv_candidate(w: &ConvWeight, sched: &PruningSchedule, threshold: f64) -> PruneMask {
    let cap = sched.max_non_zero;
    // A 1×1 kernel is a single weight; window pruning degenerates there, so
    // those layers are always pruned kernel-wise.
    if w.dims().kernel_len() == 1 {
        return ck_mask(w, threshold, cap);
    }
    match sched.granularity {
        Granularity::Window => window_mask(w, threshold, cap),
        Granularity::Ck => ck_mask(w, threshold, cap),
        Granularity::Combined => combined_mask(w, threshold, sched.window_fraction, cap),
        Granularity::FcFine | Granularity::FcBlock => PruneMask::keep_all(w),
    }
}

/// Re-evaluate every mask of `model` at `threshold` and fold it into the
/// existing mask, so a pruned position stays pruned. Weights and momentum
/// are re-masked afterwards.
///
/// The FC layer first loses the rows fed by dead channels of the preceding
/// conv layer, then prunes by magnitude (eliminated rows count towards the
/// threshold), then restores column coverage among still-live positions.
pub fn prune_model(model: &mut ToyModel, sched: &PruningSchedule, threshold: f64) -> Result<()> {
    let shapes = model.shapes();
    let mut last_conv_mask: Option<PruneMask> = None;
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        match layer {
            Layer::Conv(p) => {
                if sched.granularity.prunes_conv() {
                    let cand = conv_candidate(&p.weight, sched, threshold);
                    p.mask = monotone_and(&p.mask, &cand)?;
                }
                last_conv_mask = Some(p.mask.clone());
            }
            Layer::Fc(p) => {
                let mut base = p.mask.clone();
                if let Some(conv_mask) = &last_conv_mask {
                    let channels = conv_mask.dims()[0];
                    let rows = p.weight.rows();
                    // Only a direct conv → (pool) → flatten → FC path maps rows to channels.
                    if matches!(shapes[i], ActShape::Flat(n) if n % channels == 0 && n == rows) {
                        let elim = conv_driven_fc_elimination(conv_mask, &p.weight, rows / channels)?;
                        base = monotone_and(&base, &elim)?;
                    }
                }
                let live = apply_mask(&p.weight, &base)?;
                let cand = fc_block_mask_unrepaired(&live, threshold, sched.fc_tile())?;
                let next = monotone_and(&base, &cand)?;
                let repaired = ensure_column_coverage(&next, &live)?;
                p.mask = monotone_and(&base, &repaired)?;
                last_conv_mask = None;
            }
            _ => {}
        }
    }
    model.apply_masks();
    Ok(())
}

/// Whether any FC layer has an output column with no surviving weight.
pub fn coverage_violations(model: &ToyModel) -> Vec<(usize, Vec<usize>)> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Fc(p) => column_coverage_violations(&p.mask)
                .ok()
                .filter(|v| !v.is_empty())
                .map(|v| (i, v)),
            _ => None,
        })
        .collect()
}

/// Drives training epoch by epoch. Owns the model, both data splits and the
/// shuffling RNG, so a run is a pure function of its config.
pub struct Trainer {
    config: TrainingConfig,
    model: ToyModel,
    train: Dataset,
    val: Dataset,
    rng: ChaCha8Rng,
    epoch: usize,
    metrics: Vec<MetricsRow>,
}

impl Trainer {
    /// Fresh run: data and initial weights derive from the config seeds.
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let (train, val) = make_synthetic_dataset(&config.dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ds = &config.dataset;
        let model = ToyModel::new(&config.model, ds.channels, ds.image_size, ds.n_classes, &mut rng)?;
        Ok(Trainer {
            config,
            model,
            train,
            val,
            rng,
            epoch: 0,
            metrics: Vec::new(),
        })
    }

    /// Start from a given model instead of a freshly initialised one.
    pub fn with_model(config: TrainingConfig, model: ToyModel) -> Result<Self> {
        let mut t = Self::new(config)?;
        if model.input_shape() != t.model.input_shape() || model.n_classes() != t.model.n_classes() {
            return Err(Error::config("model does not match the dataset shape"));
        }
        t.model = model;
        Ok(t)
    }

    /// Continue a run from a checkpoint written by [`save_checkpoint`].
    pub fn resume(path: &std::path::Path) -> Result<Self> {
        let (model, meta) = load_checkpoint(path)?;
        let mut t = Self::with_model(meta.config.clone(), model)?;
        t.epoch = meta.epochs_completed;
        t.rng = meta.rng.restore();
        t.metrics = meta.metrics;
        Ok(t)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn into_model(self) -> ToyModel {
        self.model
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn val_set(&self) -> &Dataset {
        &self.val
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Run one epoch; `after_batch` sees the model after every batch
    /// (update and any mask re-evaluation included).
    pub fn run_epoch_with<F: FnMut(&ToyModel)>(&mut self, mut after_batch: F) -> Result<MetricsRow> {
        let epoch = self.epoch;
        let sched = &self.config.schedule;
        let phase = sched.phase_at(epoch);
        let threshold = sched.threshold_at(epoch);
        let last_pruning_epoch = phase == Phase::Pruning && epoch + 1 == sched.freeze_epoch();
        let lr = self.config.lr_at(epoch);

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();

        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = self.train.gather(idx);
            let grads = self.model.backward(&x, &y)?;
            if !grads.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += grads.loss * idx.len() as f64;
            self.model
                .sgd_step(&grads, lr, self.config.momentum, self.config.weight_decay);
            if phase == Phase::Pruning {
                // The era's last evaluation lands on the final target so the
                // frozen mask reaches it.
                let t = if last_pruning_epoch && b + 1 == batches.len() {
                    sched.s_f
                } else {
                    threshold
                };
                prune_model(&mut self.model, sched, t)?;
            }
            after_batch(&self.model);
        }

        let row = MetricsRow {
            epoch,
            top1: evaluate(&self.model, &self.val)?,
            loss: loss_sum / self.train.len() as f64,
            sparsity: self.model.sparsity(),
            lr,
            phase,
        };
        self.metrics.push(row.clone());
        self.epoch += 1;
        Ok(row)
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRow> {
        self.run_epoch_with(|_| {})
    }

    /// Run the remaining epochs.
    pub fn run(&mut self) -> Result<&[MetricsRow]> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.metrics)
    }
}

/// Train `model` under `config` on the configured synthetic data.
pub fn train(model: ToyModel, config: &TrainingConfig) -> Result<(ToyModel, Vec<MetricsRow>)> {
    let mut t = Trainer::with_model(config.clone(), model)?;
    t.run()?;
    let metrics = t.metrics.clone();
    Ok((t.model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(s_f: f64, e_i: usize, l_p: usize, granularity: Granularity) -> TrainingConfig {
        TrainingConfig {
            epochs: 6,
            batch_size: 16,
            lr0: 0.05,
            lr_drop_epochs: vec![4],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 5,
            schedule: PruningSchedule::new(s_f, e_i, l_p, granularity).unwrap(),
            dataset: SyntheticSpec {
                n_train: 64,
                n_val: 32,
                image_size: 4,
                channels: 2,
                n_classes: 3,
                seed: 3,
                noise: 0.3,
            },
            model: ModelSpec::default(),
        }
    }

    #[test]
    fn lr_steps() {
        let mut c = small_config(0.5, 1, 2, Granularity::Ck);
        c.lr0 = 0.05;
        c.lr_drop_epochs = vec![30, 60, 90];
        assert_eq!(c.lr_at(0), 0.05);
        assert_eq!(c.lr_at(29), 0.05);
        assert!((c.lr_at(30) - 0.005).abs() < 1e-15);
        assert!((c.lr_at(60) - 0.0005).abs() < 1e-15);
        assert!((c.lr_at(95) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0.5, 1, 2, Granularity::Ck);
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config(0.5, 1, 2, Granularity::Ck);
        c.lr_drop_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config(0.5, 1, 2, Granularity::Ck);
        c.epochs = 0;
        assert!(Trainer::new(c).is_err());
    }

    #[test]
    fn zero_target_matches_dense_run() {
        // era beyond the last epoch: never prunes at all
        let dense = small_config(0.0, 100, 1, Granularity::Window);
        let mut pruned_cfg = dense.clone();
        pruned_cfg.schedule.e_i = 1;
        pruned_cfg.schedule.l_p = 3;
        let mut a = Trainer::new(dense).unwrap();
        let mut b = Trainer::new(pruned_cfg).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.model(), b.model());
        let strip = |m: &[MetricsRow]| m.iter().map(|r| (r.top1, r.loss, r.sparsity)).collect::<Vec<_>>();
        assert_eq!(strip(a.metrics()), strip(b.metrics()));
    }

    #[test]
    fn era_reaches_target_and_freezes() {
        for g in [Granularity::Window, Granularity::Ck, Granularity::Combined, Granularity::FcFine] {
            let mut t = Trainer::new(small_config(0.6, 1, 3, g)).unwrap();
            t.run().unwrap();
            let m = t.metrics();
            assert_eq!(m[0].phase, Phase::Dense);
            assert_eq!(m[4].phase, Phase::Frozen);
            assert!(m[3].sparsity >= m[2].sparsity);
            assert_eq!(m[4].sparsity, m[5].sparsity, "{g:?}");
            assert!(coverage_violations(t.model()).is_empty());
        }
    }

    #[test]
    fn prune_model_is_monotone() {
        let mut t = Trainer::new(small_config(0.6, 0, 3, Granularity::Ck)).unwrap();
        let sched = t.config().schedule.clone();
        prune_model(&mut t.model, &sched, 0.5).unwrap();
        let first: Vec<PruneMask> = t.model().masks().into_iter().cloned().collect();
        prune_model(&mut t.model, &sched, 0.2).unwrap();
        for (a, b) in first.iter().zip(t.model().masks()) {
            assert_eq!(monotone_and(a, b).unwrap(), *b);
            assert!(b.pruned() >= a.pruned());
        }
    }

    #[test]
    fn dead_channels_remove_fc_rows() {
        let mut t = Trainer::new(small_config(0.6, 0, 3, Granularity::Ck)).unwrap();
        let sched = t.config().schedule.clone();
        if let Layer::Conv(p) = &mut t.model.layers_mut()[2] {
            let mut bits = p.mask.bits().to_vec();
            bits[..8].fill(false); // channel 0 of the 1×1 layer
            p.mask = PruneMask::from_bits(p.mask.dims(), bits).unwrap();
        }
        prune_model(&mut t.model, &sched, 0.0).unwrap();
        let Layer::Fc(p) = &t.model().layers()[6] else { panic!() };
        let cols = p.weight.cols();
        // neurons_per_channel = (4 / 2)^2 = 4 rows for channel 0
        assert!(p.mask.bits()[..4 * cols].iter().all(|&b| !b));
        assert!(p.mask.bits()[4 * cols..].iter().all(|&b| b));
    }

    #[test]
    fn nan_loss_aborts() {
        let mut t = Trainer::new(small_config(0.0, 0, 1, Granularity::Ck)).unwrap();
        t.config.lr0 = 1e200;
        let err = t.run().unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
