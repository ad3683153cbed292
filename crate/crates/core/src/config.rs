//! Run configuration with validated defaults.
//!
//! Every field has a default; an empty configuration runs the full algorithm
//! on the standard synthetic task (learning rate 0.03 with inverse-time decay
//! 0.001, batch size 50, 4 local epochs, Dirichlet 0.5 partitions, lognormal
//! sample counts with sigma 0.1, blend constant 1.5, 15x device-speed
//! disparity). Unknown keys are rejected at parse time by the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Architecture;
use crate::selection::ConverterMode;
use crate::topology::TopologyKind;

#[derive(Debug, Error)]
#[error("invalid config: {key}: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError { key: key.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    /// Within-class noise relative to the class-center spread.
    pub spread: f64,
    /// Dirichlet concentration for the non-IID partition.
    pub alpha: f64,
    /// Log-scale sigma of the per-device sample counts; 0 splits evenly.
    pub lognormal_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { classes: 10, dims: 32, samples: 10_000, spread: 1.0, alpha: 0.5, lognormal_sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Hidden width (MLP only).
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: ArchKind::Softmax, hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub n: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig { kind: TopologyKind::Exponential, n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    /// Inverse-time decay: lr_t = lr / (1 + lr_decay * t).
    pub lr_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// T: local updates per device before a device stops.
    pub max_local_updates: u64,
    /// Terminate early when the global consensus distance drops below this
    /// (0 disables the check).
    pub consensus_threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.03,
            lr_decay: 0.001,
            batch_size: 50,
            local_epochs: 4,
            max_local_updates: 200,
            consensus_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// When false, control parameters stay frozen at 1 (static weights).
    pub dynamic_weights: bool,
    pub eta_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub loss_floor: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            dynamic_weights: true,
            eta_lambda: 0.01,
            lambda_min: 1e-3,
            lambda_max: 1e3,
            loss_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// When false every cached model joins the aggregation and the policy
    /// never trains.
    pub enabled: bool,
    pub mode: ConverterMode,
    pub eta_prime: f64,
    pub hidden: usize,
    pub reward_window: usize,
    pub grad_clip: f64,
    pub pretrain: bool,
    pub pretrain_bce_target: f64,
    pub pretrain_step_cap: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            enabled: true,
            mode: ConverterMode::Sample,
            eta_prime: 0.05,
            hidden: 8,
            reward_window: 10,
            grad_clip: 5.0,
            pretrain: true,
            pretrain_bce_target: 0.3,
            pretrain_step_cap: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub enabled: bool,
    /// Blend constant C in the exploration schedule.
    pub c: f64,
    /// Prune every this many local updates.
    pub cadence: u64,
    pub p_max: f64,
    pub probes: usize,
    pub probe_radius: f64,
    /// Relative ridge added to the Hessian before solves.
    pub eps_rel: f64,
    /// Dense-Hessian size cap; larger models use the matrix-free path.
    pub k_max: usize,
    pub lanczos_steps: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            enabled: true,
            c: 1.5,
            cadence: 5,
            p_max: 0.8,
            probes: 8,
            probe_radius: 0.05,
            eps_rel: 1e-6,
            k_max: 512,
            lanczos_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Max/min device speed disparity (1 = homogeneous).
    pub speed_ratio: f64,
    /// Seconds of simulated compute per FLOP.
    pub time_per_flop: f64,
    /// Link bandwidth in bytes per simulated second (`inf` allowed).
    pub bandwidth: f64,
    /// Simulated seconds between metric evaluations.
    pub eval_interval: f64,
    pub heartbeat_interval: f64,
    pub heartbeat_timeout: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            speed_ratio: 15.0,
            time_per_flop: 1e-8,
            bandwidth: 1e6,
            eval_interval: 5.0,
            heartbeat_interval: 10.0,
            heartbeat_timeout: 30.0,
        }
    }
}

/// Complete configuration of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Accuracy that defines time-to-target in the summary (unset: never).
    pub target_accuracy: Option<f64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub topology: TopologyConfig,
    pub training: TrainingConfig,
    pub aggregation: AggregationConfig,
    pub selection: SelectionConfig,
    pub pruning: PruningConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn arch(&self) -> Architecture {
        match self.model.arch {
            ArchKind::Softmax => Architecture::Softmax { dims: self.data.dims, classes: self.data.classes },
            ArchKind::Mlp => Architecture::Mlp {
                dims: self.data.dims,
                hidden: self.model.hidden,
                classes: self.data.classes,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(bad("data.classes", "must be >= 2"));
        }
        if d.dims < 2 {
            return Err(bad("data.dims", "must be >= 2"));
        }
        if d.samples < 5 {
            return Err(bad("data.samples", "must be >= 5 (20% test split needs samples)"));
        }
        if !(d.spread >= 0.0) {
            return Err(bad("data.spread", "must be >= 0"));
        }
        if !(d.alpha > 0.0) {
            return Err(bad("data.alpha", "must be > 0"));
        }
        if !(d.lognormal_sigma >= 0.0) {
            return Err(bad("data.lognormal_sigma", "must be >= 0"));
        }
        if self.model.hidden < 1 {
            return Err(bad("model.hidden", "must be >= 1"));
        }
        let n = self.topology.n;
        if n < 1 {
            return Err(bad("topology.n", "must be >= 1"));
        }
        if d.samples - d.samples / 5 < n {
            return Err(bad("topology.n", "more devices than training samples"));
        }
        let t = &self.training;
        if !(t.lr > 0.0) {
            return Err(bad("training.lr", "must be > 0"));
        }
        if !(t.lr_decay >= 0.0) {
            return Err(bad("training.lr_decay", "must be >= 0"));
        }
        if t.batch_size < 1 {
            return Err(bad("training.batch_size", "must be >= 1"));
        }
        if t.local_epochs < 1 {
            return Err(bad("training.local_epochs", "must be >= 1"));
        }
        if t.max_local_updates < 1 {
            return Err(bad("training.max_local_updates", "must be >= 1"));
        }
        if !(t.consensus_threshold >= 0.0) {
            return Err(bad("training.consensus_threshold", "must be >= 0"));
        }
        let a = &self.aggregation;
        if !(a.eta_lambda >= 0.0) {
            return Err(bad("aggregation.eta_lambda", "must be >= 0"));
        }
        if !(a.lambda_min > 0.0 && a.lambda_max >= a.lambda_min) {
            return Err(bad("aggregation.lambda_min", "need 0 < lambda_min <= lambda_max"));
        }
        if !(a.loss_floor > 0.0) {
            return Err(bad("aggregation.loss_floor", "must be > 0"));
        }
        let s = &self.selection;
        if s.hidden < 1 {
            return Err(bad("selection.hidden", "must be >= 1"));
        }
        if s.reward_window < 1 {
            return Err(bad("selection.reward_window", "must be >= 1"));
        }
        if !(s.eta_prime >= 0.0) {
            return Err(bad("selection.eta_prime", "must be >= 0"));
        }
        if !(s.grad_clip > 0.0) {
            return Err(bad("selection.grad_clip", "must be > 0"));
        }
        let p = &self.pruning;
        if !(p.c > 0.0) {
            return Err(bad("pruning.c", "must be > 0"));
        }
        if p.cadence < 1 {
            return Err(bad("pruning.cadence", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&p.p_max) {
            return Err(bad("pruning.p_max", "must be in [0, 1)"));
        }
        if p.probes < 2 {
            return Err(bad("pruning.probes", "must be >= 2"));
        }
        if !(p.probe_radius > 0.0) {
            return Err(bad("pruning.probe_radius", "must be > 0"));
        }
        if !(p.eps_rel >= 0.0) {
            return Err(bad("pruning.eps_rel", "must be >= 0"));
        }
        if p.k_max < 1 || p.lanczos_steps < 1 {
            return Err(bad("pruning.k_max", "caps must be >= 1"));
        }
        let m = &self.sim;
        if !(m.speed_ratio >= 1.0) {
            return Err(bad("sim.speed_ratio", "must be >= 1"));
        }
        if !(m.time_per_flop > 0.0) {
            return Err(bad("sim.time_per_flop", "must be > 0"));
        }
        if !(m.bandwidth > 0.0) {
            return Err(bad("sim.bandwidth", "must be > 0 (inf allowed)"));
        }
        if !(m.eval_interval > 0.0) {
            return Err(bad("sim.eval_interval", "must be > 0"));
        }
        if !(m.heartbeat_interval > 0.0) || !(m.heartbeat_timeout > 0.0) {
            return Err(bad("sim.heartbeat_interval", "must be > 0"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0 < t && t <= 1.0) {
                return Err(bad("target_accuracy", "must be in (0, 1]"));
            }
        }
        Ok(())
    }
}
