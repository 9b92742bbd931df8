//! Untargeted FGSM and the epsilon sweep used to measure robustness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Dataset, ToyModel, PIXEL_RANGE};

/// The epsilon grid of the robustness table.
pub const DEFAULT_EPSILONS: [f64; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

fn default_clamp() -> (f64, f64) {
    PIXEL_RANGE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_clamp")]
    pub clamp_range: (f64, f64),
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilons: DEFAULT_EPSILONS.to_vec(),
            clamp_range: PIXEL_RANGE,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("epsilons must be finite and >= 0"));
        }
        if self.epsilons.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("epsilons must be sorted ascending"));
        }
        let (lo, hi) = self.clamp_range;
        if !(lo < hi) {
            return Err(Error::config(format!("clamp range ({lo}, {hi}) is empty")));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + ε·sign(∂loss/∂x), lo, hi)` for every sample, using its true
/// label.
pub fn fgsm_perturb(
    model: &ToyModel,
    x: &[f64],
    labels: &[usize],
    epsilon: f64,
    clamp_range: (f64, f64),
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let grads = model.backward(x, labels)?;
    let (lo, hi) = clamp_range;
    Ok(x.iter()
        .zip(&grads.input)
        .map(|(&v, &g)| (v + epsilon * sign(g)).clamp(lo, hi))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub top1: f64,
}

/// Top-1 accuracy on the whole of `val` attacked at each epsilon.
pub fn robustness_sweep(model: &ToyModel, val: &Dataset, spec: &AttackSpec) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    spec.epsilons
        .iter()
        .map(|&epsilon| {
            let mut correct = 0usize;
            for (x, y) in val.batches(256) {
                let adv = fgsm_perturb(model, &x, &y, epsilon, spec.clamp_range)?;
                let pred = model.predict(&adv)?;
                correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
            }
            Ok(SweepPoint {
                epsilon,
                top1: correct as f64 / val.len() as f64,
            })
        })
        .collect()
}
