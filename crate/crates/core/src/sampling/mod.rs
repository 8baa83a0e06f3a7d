//! Keyframe sampling: the minimal-subset (MSA) sliding-window optimizer and
//! the baseline samplers it is benchmarked against.

mod msa;
mod stream;

pub use msa::{
    constrained_power_set, info_preservation, msa_score, msa_select_window, numeric_jacobian,
    principal_transform, redundancy, PrincipalTransform, WindowSolution, MAX_WINDOW,
};
pub use stream::{
    make_sampler, stream_sample, AllSampler, ConstantSampler, EntropySampler, KeyframeSampler,
    MsaSampler, SamplerMethod, SpaciousnessSampler, ENTROPY_HISTORY,
};

use serde::{Deserialize, Serialize};

use crate::descriptors::Descriptor;
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// A retained (pose, descriptor, measurement channels) tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    /// Seconds.
    pub timestamp: f64,
    /// Pose estimate available to the front-end (odometry frame).
    pub pose: Pose,
    pub descriptor: Descriptor,
    /// Meters.
    pub spaciousness: Option<f64>,
    /// Nats.
    pub entropy_proxy: Option<f64>,
}

impl Keyframe {
    pub fn new(id: u64, timestamp: f64, pose: Pose, descriptor: Descriptor) -> Self {
        Self {
            id,
            timestamp,
            pose,
            descriptor,
            spaciousness: None,
            entropy_proxy: None,
        }
    }
}

/// Objective used to rank candidate subsets. Both are minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    /// `(rho + alpha) / (pi - beta)`, exactly as written.
    #[default]
    PaperLiteral,
    /// `(rho + alpha) * (1 - pi)`.
    InfoMax,
}

impl ScoringMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoringMode::PaperLiteral => "paper-literal",
            ScoringMode::InfoMax => "info-max",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub window_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Minimum gap between consecutive kept poses (meters).
    pub delta_lower: f64,
    /// Maximum gap between consecutive kept poses (meters).
    pub delta_upper: f64,
    pub scoring_mode: ScoringMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            alpha: 1.0,
            beta: 1.0,
            delta_lower: 1.0,
            delta_upper: 5.0,
            scoring_mode: ScoringMode::PaperLiteral,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size > MAX_WINDOW {
            return Err(Error::WindowTooLarge(self.window_size));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be in [2, 16]".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be > 0".into()));
        }
        if !(self.delta_lower > 0.0 && self.delta_lower < self.delta_upper) {
            return Err(Error::Config("require 0 < delta_lower < delta_upper".into()));
        }
        Ok(())
    }
}
