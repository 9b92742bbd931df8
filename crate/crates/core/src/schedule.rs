//! Gradual sparsity-threshold schedule and the pruning-era phases.
//!
//! The threshold rises from 0 at the first pruning epoch to the final
//! sparsity `s_f` over a pruning era of `l_p` epochs:
//!
//! ```text
//! threshold(e) = s_f - (s_i + s_f) * (1 - (e - e_i) / l_p)^r
//! ```
//!
//! Before the era training is dense; after it the mask is frozen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pruning scheme generates the masks.
///
/// The conv schemes also prune the FC layer at the same threshold (fine, or
/// block when `fc_block` is set). The FC schemes leave conv layers dense.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Window,
    Ck,
    Combined,
    FcFine,
    FcBlock,
}

impl Granularity {
    pub fn prunes_conv(self) -> bool {
        matches!(self, Granularity::Window | Granularity::Ck | Granularity::Combined)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dense,
    Pruning,
    Frozen,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Pruning => "pruning",
            Phase::Frozen => "frozen",
        }
    }
}

fn default_r() -> f64 {
    3.0
}

fn default_window_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSchedule {
    /// Initial sparsity. Only 0 is accepted.
    #[serde(default)]
    pub s_i: f64,
    /// Final sparsity reached at the end of the era.
    pub s_f: f64,
    /// First epoch of pruning.
    pub e_i: usize,
    /// Length of the pruning era in epochs.
    pub l_p: usize,
    /// Exponent controlling how quickly the threshold rises.
    #[serde(default = "default_r")]
    pub r: f64,
    pub granularity: Granularity,
    /// Cap on surviving weights per kernel (window) or kernels per input
    /// channel (CK).
    #[serde(default)]
    pub max_non_zero: Option<usize>,
    /// Share of the threshold handled by window pruning in combined mode.
    #[serde(default = "default_window_fraction")]
    pub window_fraction: f64,
    /// Tile edge for FC block pruning (1 to 4). Required for `fc_block`
    /// granularity; optional for the conv schemes (defaults to fine).
    #[serde(default)]
    pub fc_block: Option<usize>,
}

impl PruningSchedule {
    /// A schedule with the usual defaults (`r = 3`, window fraction 0.8, no cap).
    pub fn new(s_f: f64, e_i: usize, l_p: usize, granularity: Granularity) -> Result<Self> {
        let sched = PruningSchedule {
            s_i: 0.0,
            s_f,
            e_i,
            l_p,
            r: default_r(),
            granularity,
            max_non_zero: None,
            window_fraction: default_window_fraction(),
            fc_block: None,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_i != 0.0 {
            return Err(Error::config(format!("s_i must be 0, got {}", self.s_i)));
        }
        if !(0.0..=1.0).contains(&self.s_f) {
            return Err(Error::config(format!("s_f must lie in [0, 1], got {}", self.s_f)));
        }
        if self.l_p < 1 {
            return Err(Error::config("l_p must be at least 1"));
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(Error::config(format!("r must be a finite value >= 1, got {}", self.r)));
        }
        if !(0.0..=1.0).contains(&self.window_fraction) {
            return Err(Error::config(format!(
                "window_fraction must lie in [0, 1], got {}",
                self.window_fraction
            )));
        }
        if let Some(b) = self.fc_block {
            if !(1..=4).contains(&b) {
                return Err(Error::config(format!("fc_block must lie in [1, 4], got {b}")));
            }
        }
        if self.granularity == Granularity::FcBlock && self.fc_block.is_none() {
            return Err(Error::config("fc_block granularity needs an fc_block size"));
        }
        if self.max_non_zero == Some(0) {
            return Err(Error::config("max_non_zero must be at least 1"));
        }
        Ok(())
    }

    /// First epoch after the era, at which the mask is frozen.
    pub fn freeze_epoch(&self) -> usize {
        self.e_i + self.l_p
    }

    /// Target sparsity for epoch `epoch`. Constant across the batches of
    /// that epoch.
    pub fn threshold_at(&self, epoch: usize) -> f64 {
        if epoch < self.e_i {
            return 0.0;
        }
        if epoch >= self.freeze_epoch() {
            return self.s_f;
        }
        let progress = (epoch - self.e_i) as f64 / self.l_p as f64;
        let t = self.s_f - (self.s_i + self.s_f) * (1.0 - progress).powf(self.r);
        t.clamp(0.0, self.s_f)
    }

    pub fn phase_at(&self, epoch: usize) -> Phase {
        if epoch < self.e_i {
            Phase::Dense
        } else if epoch < self.freeze_epoch() {
            Phase::Pruning
        } else {
            Phase::Frozen
        }
    }

    /// FC tile edge used when pruning the FC layer (1 = fine pruning).
    pub fn fc_tile(&self) -> usize {
        match self.granularity {
            Granularity::FcFine => 1,
            _ => self.fc_block.unwrap_or(1),
        }
    }
}
