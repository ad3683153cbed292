//! Metrics schema: the per-evaluation CSV, the pruning log, and the JSON
//! run summary. Formatting is deterministic so identical runs produce
//! byte-identical files.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One device row at one evaluation instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sim_time: f64,
    pub device: usize,
    pub t_i: u64,
    pub train_loss: f64,
    pub test_acc_self: f64,
    pub test_acc_avg: f64,
    pub density: f64,
    pub consensus_global: f64,
    pub bytes_sent_cum: u64,
    pub flops_cum: u64,
}

/// One pruning-round log row.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneLogRow {
    pub round: u64,
    pub device: usize,
    pub p_star: f64,
    pub p_i: f64,
    pub lambda_g: f64,
    pub lipschitz: f64,
    pub density: f64,
    pub predicted_dfc: f64,
    pub realized_dloss: f64,
    pub initial_drift: f64,
}

/// Final-state block of the run summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalMetrics {
    pub sim_time: f64,
    pub mean_test_acc_self: f64,
    pub test_acc_avg: f64,
    pub consensus_global: f64,
    pub mean_density: f64,
    pub total_bytes: u64,
    pub total_flops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: String,
    pub config: RunConfig,
    pub final_metrics: FinalMetrics,
    /// Simulated time when the average model first reached the target
    /// accuracy; null when no target is set or it was never reached.
    pub time_to_target: Option<f64>,
    pub target_accuracy: Option<f64>,
    /// Largest |1 - sum(weights)| observed over all aggregations.
    pub weight_sum_max_dev: f64,
    /// Aggregations that reused a cached model already aggregated before.
    pub reaggregation_total: u64,
    pub payloads_sent: u64,
    pub payloads_received: u64,
    pub coordinator_hash: u64,
    /// `(device, stale)` liveness at the end of the run.
    pub liveness: Vec<(usize, bool)>,
}

/// Full output of one run.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub prune_rows: Vec<PruneLogRow>,
    pub summary: RunSummary,
}

impl MetricsLog {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(
            "sim_time,device,t_i,train_loss,test_acc_self,test_acc_avg,density,consensus_global,bytes_sent_cum,flops_cum\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.sim_time,
                r.device,
                r.t_i,
                r.train_loss,
                r.test_acc_self,
                r.test_acc_avg,
                r.density,
                r.consensus_global,
                r.bytes_sent_cum,
                r.flops_cum
            ));
        }
        s
    }

    pub fn pruning_csv(&self) -> String {
        let mut s = String::from(
            "round,device,p_star,p_i,lambda_g,lipschitz,density,predicted_dfc,realized_dloss,initial_drift\n",
        );
        for r in &self.prune_rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                r.device,
                r.p_star,
                r.p_i,
                r.lambda_g,
                r.lipschitz,
                r.density,
                r.predicted_dfc,
                r.realized_dloss,
                r.initial_drift
            ));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}
