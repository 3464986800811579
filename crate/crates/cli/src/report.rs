//! Machine-readable report emitted by every analysis command. The matching
//! JSON schema lives in `schema/analysis-report.schema.json`.

use std::path::Path;

use nnclust::graph::WeightedGraph;
use nnclust::scenarios::{Experiment, ExperimentResult, Scenario};
use nnclust::shuffle::ShuffleReport;
use nnclust::spectral::{Partition, SpectralConfig};
use nnclust::trainer::EpochMetrics;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub input: Option<InputDigest>,
    pub graph: GraphSummary,
    pub spectral: SpectralConfig,
    pub partition: PartitionSummary,
    pub ncut: f64,
    pub shuffle: Option<ShuffleReport>,
    pub training: Option<TrainingSummary>,
    /// Present only with `--timing`, so default reports stay byte-identical.
    pub timing: Option<Timing>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        InputDigest {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSummary {
    pub kind: GraphKind,
    pub nodes: usize,
    pub edges: usize,
    pub total_weight: f64,
}

impl GraphSummary {
    pub fn of(kind: GraphKind, graph: &WeightedGraph) -> Self {
        GraphSummary {
            kind,
            nodes: graph.len(),
            edges: graph.edge_count(),
            total_weight: graph.edges().map(|(_, _, w)| w).sum(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    pub cluster_volumes: Vec<f64>,
    pub empty_clusters: usize,
}

impl PartitionSummary {
    pub fn of(graph: &WeightedGraph, partition: &Partition) -> Self {
        PartitionSummary {
            k: partition.k(),
            cluster_sizes: partition.cluster_sizes(),
            cluster_volumes: (0..partition.k())
                .map(|c| graph.volume(&partition.members(c)))
                .collect(),
            empty_clusters: partition.empty_clusters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub scenario: Scenario,
    pub experiment: Experiment,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
    /// Mean task loss per epoch.
    pub loss_curve: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainingSummary {
    pub fn new(scenario: Scenario, experiment: Experiment, result: &ExperimentResult) -> Self {
        TrainingSummary {
            scenario,
            experiment,
            train_accuracy: result.train_accuracy,
            test_accuracy: result.test_accuracy,
            test_mse: result.test_mse,
            baseline_mse: result.baseline_mse,
            loss_curve: result.metrics.iter().map(|m| m.loss).collect(),
            metrics: result.metrics.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
}
