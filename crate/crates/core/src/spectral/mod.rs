//! Normalized spectral clustering and the n-cut objective.
//!
//! [`spectral_cluster`] takes the `k` smallest eigenvectors of `L_norm`,
//! treats row `n` of the resulting `N x k` matrix as the embedding of node
//! `n`, and runs k-means on those points.

mod eigen;
mod kmeans;
mod ncut;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use eigen::{
    normalized_laplacian, relative_residual, smallest_eigenpairs, EigenOptions, Eigenpairs,
};
pub use kmeans::{kmeans, KMeansResult};
pub use ncut::{
    brute_force_min_ncut, cluster_cuts, ncut, ncut_stub_estimate, BRUTE_FORCE_MAX_NODES,
};

use crate::graph::WeightedGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("node {0} has zero degree; strip dead nodes first")]
    ZeroDegree(usize),
    #[error("need at least k={k} nodes, graph has {nodes}")]
    TooFewNodes { nodes: usize, k: usize },
    #[error("need at least k={k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("eigenpair {index} did not converge: residual {residual:e} > {tolerance:e}")]
    NonConvergence {
        index: usize,
        residual: f64,
        tolerance: f64,
    },
    #[error("cluster {0} has zero volume")]
    ZeroVolume(usize),
    #[error("partition has {labels} labels for {nodes} nodes")]
    PartitionMismatch { labels: usize, nodes: usize },
    #[error("label {label} out of range for k={k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("exhaustive search supports at most {max} nodes, graph has {nodes}")]
    TooLarge { nodes: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Assignment of every node to one of `k` clusters. Labels are `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self, SpectralError> {
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(SpectralError::LabelOutOfRange { label, k });
        }
        Ok(Partition { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == cluster)
            .collect()
    }

    pub fn empty_clusters(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s == 0).count()
    }

    /// True when some cluster is empty.
    pub fn is_degenerate(&self) -> bool {
        self.empty_clusters() > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub k: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    pub eigensolver_tolerance: f64,
    pub dense_threshold: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            k: 12,
            kmeans_restarts: 10,
            kmeans_max_iters: 300,
            seed: 0,
            eigensolver_tolerance: 1e-9,
            dense_threshold: 2000,
        }
    }
}

impl SpectralConfig {
    pub fn with_k(k: usize) -> Self {
        SpectralConfig {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.k < 2 {
            return Err(SpectralError::InvalidConfig(format!(
                "k must be >= 2, got {}",
                self.k
            )));
        }
        if self.kmeans_restarts < 1 || self.kmeans_max_iters < 1 {
            return Err(SpectralError::InvalidConfig(
                "k-means restarts and iterations must be >= 1".into(),
            ));
        }
        if self.eigensolver_tolerance.is_nan() || self.eigensolver_tolerance <= 0.0 {
            return Err(SpectralError::InvalidConfig(
                "eigensolver tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn eigen_options(&self) -> EigenOptions {
        EigenOptions {
            tolerance: self.eigensolver_tolerance,
            dense_threshold: self.dense_threshold,
            seed: self.seed,
            ..EigenOptions::default()
        }
    }
}

/// Node embedding used for clustering: row `n` is `y_n = (u_1[n], ..., u_k[n])`.
pub fn spectral_embedding(
    graph: &WeightedGraph,
    config: &SpectralConfig,
) -> Result<Vec<Vec<f64>>, SpectralError> {
    let pairs = smallest_eigenpairs(graph, config.k, &config.eigen_options())?;
    Ok(pairs
        .vectors
        .row_iter()
        .map(|row| row.iter().copied().collect())
        .collect())
}

pub fn spectral_cluster(
    graph: &WeightedGraph,
    config: &SpectralConfig,
) -> Result<Partition, SpectralError> {
    config.validate()?;
    let points = spectral_embedding(graph, config)?;
    let result = kmeans(
        &points,
        config.k,
        config.kmeans_restarts,
        config.kmeans_max_iters,
        config.seed,
    )?;
    Partition::new(result.labels, config.k)
}

/// Spectral clustering followed by n-cut evaluation.
pub fn cluster_ncut(
    graph: &WeightedGraph,
    config: &SpectralConfig,
) -> Result<(Partition, f64), SpectralError> {
    let partition = spectral_cluster(graph, config)?;
    let value = ncut(graph, &partition)?;
    Ok((partition, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;

    pub(crate) fn two_cliques(bridge: f64) -> WeightedGraph {
        let nodes = (0..8).map(|u| NodeId::new(0, u)).collect();
        let mut edges = Vec::new();
        for block in [0, 4] {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    edges.push((block + i, block + j, 1.0));
                }
            }
        }
        edges.push((3, 4, bridge));
        WeightedGraph::from_edges(nodes, edges).unwrap()
    }

    #[test]
    fn recovers_two_cliques() {
        let g = two_cliques(0.01);
        let config = SpectralConfig::with_k(2);
        let (p, value) = cluster_ncut(&g, &config).unwrap();
        let l = p.labels();
        assert!(l[..4].iter().all(|&x| x == l[0]));
        assert!(l[4..].iter().all(|&x| x == l[4]));
        assert_ne!(l[0], l[4]);
        let (_, best) = brute_force_min_ncut(&g, 2).unwrap();
        assert!((value - best).abs() < 1e-12);
    }

    #[test]
    fn disconnected_components() {
        let nodes = (0..6).map(|u| NodeId::new(0, u)).collect();
        let edges = vec![
            (0, 1, 1.0),
            (1, 2, 1.0),
            (3, 4, 2.0),
            (4, 5, 0.5),
            (3, 5, 1.0),
        ];
        let g = WeightedGraph::from_edges(nodes, edges).unwrap();
        let (p, value) = cluster_ncut(&g, &SpectralConfig::with_k(2)).unwrap();
        assert_eq!(value, 0.0);
        assert_ne!(p.labels()[0], p.labels()[3]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let g = two_cliques(0.3);
        let config = SpectralConfig {
            k: 3,
            seed: 77,
            ..SpectralConfig::default()
        };
        assert_eq!(
            spectral_cluster(&g, &config).unwrap(),
            spectral_cluster(&g, &config).unwrap()
        );
    }

    #[test]
    fn scale_invariance() {
        let g = two_cliques(0.2);
        let config = SpectralConfig::with_k(3);
        let (p1, v1) = cluster_ncut(&g, &config).unwrap();
        let (p2, v2) = cluster_ncut(&g.scaled(13.0), &config).unwrap();
        assert_eq!(p1, p2);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn rejects_k_below_two() {
        let g = two_cliques(0.1);
        assert!(matches!(
            spectral_cluster(&g, &SpectralConfig::with_k(1)),
            Err(SpectralError::InvalidConfig(_))
        ));
    }

    #[test]
    fn partition_rejects_out_of_range_labels() {
        assert!(Partition::new(vec![0, 2], 2).is_err());
        let p = Partition::new(vec![0, 0, 2], 3).unwrap();
        assert_eq!(p.cluster_sizes(), vec![2, 0, 1]);
        assert!(p.is_degenerate());
    }
}
