//! Structured results of one federated run.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Seeds};
use crate::federation::CommRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// The held-out target domain.
    Target,
    /// A source client's evaluation split.
    SourceEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub split: EvalSplit,
    pub samples: usize,
    pub accuracy: f64,
    pub ce: f64,
    pub kl: f64,
    pub dropped_rate: f64,
    /// Accuracy per class; `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    /// Mean training losses over all local steps of the round.
    pub train: LossSummary,
    pub train_dropped_rate: f64,
    pub evals: Vec<DomainMetrics>,
    /// Mean mixture weight per expert on the target domain.
    pub utilization: Vec<f64>,
    /// Digest of the keys held by every client after the round.
    pub key_digest: u64,
}

impl RoundRecord {
    pub fn target(&self) -> Option<&DomainMetrics> {
        self.evals.iter().find(|m| m.split == EvalSplit::Target)
    }
}

/// Largest deviations seen while checking every routed prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingAudit {
    pub routes: u64,
    /// Max of `|Σπ − 1|` and `max(−π_m)`.
    pub max_simplex_residual: f64,
    /// Max entry of `|prompt − Σ_m π_m · expert_m|`.
    pub max_prompt_residual: f64,
}

impl RoutingAudit {
    pub fn merge(&mut self, other: &RoutingAudit) {
        self.routes += other.routes;
        self.max_simplex_residual = self.max_simplex_residual.max(other.max_simplex_residual);
        self.max_prompt_residual = self.max_prompt_residual.max(other.max_prompt_residual);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub per_client_uplink: usize,
    pub clients: usize,
    pub records: Vec<CommRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Zero-shot (reference prompt) metrics for the target and every source eval split.
    pub zero_shot: Vec<DomainMetrics>,
    pub rounds: Vec<RoundRecord>,
    pub final_target_accuracy: f64,
    pub utilization: Vec<f64>,
    pub comm: CommSummary,
    pub audit: RoutingAudit,
}

impl RunReport {
    pub fn zero_shot_target_accuracy(&self) -> f64 {
        self.zero_shot
            .iter()
            .find(|m| m.split == EvalSplit::Target)
            .map_or(0.0, |m| m.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
