use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the negative of a triplet is picked among the non-matching
/// candidates, by Euclidean distance to the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMining {
    /// Closest non-matching candidate.
    HardestClosest,
    /// Farthest non-matching candidate.
    MostDissimilar,
}

impl fmt::Display for NegativeMining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMining::HardestClosest => "hardest-closest",
            NegativeMining::MostDissimilar => "most-dissimilar",
        })
    }
}

impl FromStr for NegativeMining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hardest-closest" => Ok(NegativeMining::HardestClosest),
            "most-dissimilar" => Ok(NegativeMining::MostDissimilar),
            _ => Err(Error::Config(format!(
                "unknown negative_mining '{s}' (hardest-closest | most-dissimilar)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negative_mining: NegativeMining,
    pub threshold_init: f64,
    /// Steepness `k` of the soft threshold gate `σ(k (M − τ))`.
    pub threshold_gate_steepness: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            batch_size: 8,
            learning_rate: 1e-2,
            epochs: 20,
            negative_mining: NegativeMining::HardestClosest,
            threshold_init: 0.3,
            threshold_gate_steepness: 50.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Hyperparameters for full-scale fine-tuning.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.threshold_init > 0.0 && self.threshold_init < 1.0) {
            return Err(Error::Config(format!(
                "threshold_init must lie in (0, 1), got {}",
                self.threshold_init
            )));
        }
        if !(self.threshold_gate_steepness > 0.0) {
            return Err(Error::Config("threshold_gate_steepness must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}
