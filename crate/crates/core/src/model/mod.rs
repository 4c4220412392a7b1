//! Compound-scaled CNN weak learners.

pub mod checkpoint;
mod layers;
mod weak;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{eff_tiny_base, propagate, Activation, ConvInstance, FeatureShape, LayerSpec};
pub(crate) use weak::uniform;
pub use weak::{
    build_scaled_cnn, extractor_graph, train_weak_overfit, EpochStats, TrainConfig, TrainingRecord, WeakLearner,
    OVERFIT_EPOCHS,
};

/// Tolerance on the `alpha·beta²·gamma² ≈ 2` constraint.
pub const SCALING_TOLERANCE: f64 = 0.05;

/// Compound scaling coefficients: depth `alpha^phi`, width `beta^phi`,
/// resolution `gamma^phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            phi: 0.0,
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 1.0) {
                return Err(Error::Config(format!("{name}: must be >= 1, got {v}")));
            }
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi: must be >= 0, got {}", self.phi)));
        }
        let budget = self.flops_ratio();
        let (lo, hi) = (2.0 * (1.0 - SCALING_TOLERANCE), 2.0 * (1.0 + SCALING_TOLERANCE));
        if !(lo..=hi).contains(&budget) {
            return Err(Error::Config(format!(
                "alpha·beta²·gamma² = {budget:.4} is outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// `alpha · beta² · gamma²`.
    pub fn flops_ratio(&self) -> f64 {
        self.alpha * self.beta * self.beta * self.gamma * self.gamma
    }

    pub fn depth(&self) -> f64 {
        self.alpha.powf(self.phi)
    }

    pub fn width(&self) -> f64 {
        self.beta.powf(self.phi)
    }

    pub fn resolution(&self) -> f64 {
        self.gamma.powf(self.phi)
    }

    /// Stage repeat count after depth scaling, rounded half-up, at least 1.
    pub fn scale_repeat(&self, repeat: usize) -> usize {
        ((self.depth() * repeat as f64 + 0.5).floor() as usize).max(1)
    }

    /// Channel count after width scaling, rounded up to a multiple of 4.
    pub fn scale_channels(&self, channels: usize) -> usize {
        let scaled = self.width() * channels as f64;
        // Guard against 16·1.0 landing a hair above 16.
        let units = (scaled / 4.0 - 1e-9).ceil().max(1.0);
        units as usize * 4
    }

    pub fn scale_resolution(&self, size: usize) -> usize {
        ((self.resolution() * size as f64).round() as usize).max(1)
    }
}
