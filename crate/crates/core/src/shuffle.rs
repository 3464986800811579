//! Relative clusterability: compare a network's n-cut with those of shuffled
//! counterparts.
//!
//! MLPs are shuffled at the weight-matrix level, before graph construction.
//! CNNs are shuffled on the channel graph, one adjacent-layer block at a time.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, WeightArchive};
use crate::graph::{self, GraphError, WeightedGraph};
use crate::seed::{derive_seed, rng_from_seed, Rng, STREAM_SHUFFLE};
use crate::spectral::{cluster_ncut, SpectralConfig, SpectralError};

#[derive(Debug, Error)]
pub enum ShuffleError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("n_shuffles must be >= 1")]
    NoShuffles,
    #[error("method {0:?} needs a dense-only archive")]
    NeedsDenseArchive(ShuffleMethod),
    #[error("method {0:?} cannot be applied to a graph; use graph_edges")]
    NeedsArchive(ShuffleMethod),
    #[error("every shuffle failed; first failure: {0}")]
    AllShufflesFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMethod {
    /// Permute all entries of each weight matrix, zeros included.
    Layer,
    /// Permute only the non-zero entries of each weight matrix.
    LayerNonzero,
    /// Permute edge weights within each adjacent-layer block of the graph.
    GraphEdges,
}

#[derive(Debug, Clone, Copy)]
pub enum ShuffleInput<'a> {
    Archive(&'a WeightArchive),
    Graph(&'a WeightedGraph),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub method: ShuffleMethod,
    pub n_shuffles: usize,
    pub seed: u64,
    pub spectral: SpectralConfig,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            method: ShuffleMethod::Layer,
            n_shuffles: 50,
            seed: 0,
            spectral: SpectralConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedShuffle {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub method: ShuffleMethod,
    pub observed_ncut: f64,
    /// n-cuts of the shuffles that could be clustered, in shuffle-index order.
    pub shuffle_ncuts: Vec<f64>,
    /// Requested shuffle count.
    pub n_shuffles: usize,
    /// `(r + 1) / (n + 1)` where `r` counts shuffle n-cuts `<=` the observed one
    /// and `n` is the number of scored shuffles.
    pub p_value: f64,
    /// `(observed - mean) / std` with the sample standard deviation. Negative
    /// means more clusterable than the shuffles. Absent when the spread is zero.
    pub z_score: Option<f64>,
    pub seed: u64,
    pub spectral: SpectralConfig,
    /// The observed clustering left some cluster empty.
    pub observed_degenerate: bool,
    /// Indices of scored shuffles whose clustering left some cluster empty.
    pub degenerate_shuffles: Vec<usize>,
    /// Shuffles excluded from the statistics, e.g. because every node died.
    pub failed_shuffles: Vec<FailedShuffle>,
}

fn permute(values: &mut [f32], nonzero_only: bool, rng: &mut Rng) {
    if !nonzero_only {
        values.shuffle(rng);
        return;
    }
    let positions: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    let mut picked: Vec<f32> = positions.iter().map(|&i| values[i]).collect();
    picked.shuffle(rng);
    for (&i, v) in positions.iter().zip(picked) {
        values[i] = v;
    }
}

fn dense_layers(
    archive: &WeightArchive,
    method: ShuffleMethod,
) -> Result<Vec<Vec<f32>>, ShuffleError> {
    if !archive.is_dense_only() {
        return Err(ShuffleError::NeedsDenseArchive(method));
    }
    (0..archive.layers().len())
        .map(|i| Ok(archive.weights(i)?))
        .collect()
}

fn shuffle_archive(
    archive: &WeightArchive,
    seed: u64,
    nonzero_only: bool,
) -> Result<WeightArchive, ShuffleError> {
    let method = if nonzero_only {
        ShuffleMethod::LayerNonzero
    } else {
        ShuffleMethod::Layer
    };
    let layers = dense_layers(archive, method)?;
    let mut rng = rng_from_seed(seed);
    let mut out = archive.clone();
    for (i, mut values) in layers.into_iter().enumerate() {
        permute(&mut values, nonzero_only, &mut rng);
        out = out.with_weights(i, &values)?;
    }
    Ok(out)
}

/// Uniformly permutes every dense layer's weights. Biases are untouched.
pub fn shuffle_layer_weights(
    archive: &WeightArchive,
    seed: u64,
) -> Result<WeightArchive, ShuffleError> {
    shuffle_archive(archive, seed, false)
}

/// Permutes each layer's non-zero weights among the non-zero positions,
/// preserving the sparsity pattern exactly.
pub fn shuffle_nonzero(archive: &WeightArchive, seed: u64) -> Result<WeightArchive, ShuffleError> {
    shuffle_archive(archive, seed, true)
}

/// Permutes the weights of every bipartite block between adjacent node layers
/// over all node pairs of the block, absent edges counting as zero. The result
/// may contain dead nodes.
pub fn shuffle_graph_edges(graph: &WeightedGraph, seed: u64) -> WeightedGraph {
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        by_layer.entry(node.layer).or_default().push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::with_capacity(graph.edge_count());
    for (&layer, sources) in &by_layer {
        let Some(targets) = by_layer.get(&(layer + 1)) else {
            continue;
        };
        let mut block: Vec<f64> = sources
            .iter()
            .flat_map(|&i| targets.iter().map(move |&j| (i, j)))
            .map(|(i, j)| graph.weight(i, j))
            .collect();
        block.shuffle(&mut rng);
        let pairs = sources
            .iter()
            .flat_map(|&i| targets.iter().map(move |&j| (i, j)));
        for ((i, j), w) in pairs.zip(block) {
            if w != 0.0 {
                edges.push((i, j, w));
            }
        }
    }
    WeightedGraph::from_edges(graph.nodes().to_vec(), edges)
        .expect("permuted weights of a valid graph form a valid graph")
}

/// MLP graph for dense-only archives, channel graph otherwise.
pub fn archive_graph(archive: &WeightArchive) -> Result<WeightedGraph, GraphError> {
    if archive.is_dense_only() {
        graph::mlp_to_graph(archive)
    } else {
        graph::cnn_to_graph(archive)
    }
}

struct Scored {
    ncut: f64,
    degenerate: bool,
}

fn score(graph: WeightedGraph, spectral: &SpectralConfig) -> Result<Scored, ShuffleError> {
    let graph = graph::strip_dead_nodes(graph)?;
    let (partition, ncut) = cluster_ncut(&graph, spectral)?;
    Ok(Scored {
        ncut,
        degenerate: partition.is_degenerate(),
    })
}

enum Source {
    Layers {
        shapes: Vec<(usize, usize)>,
        values: Vec<Vec<f32>>,
        nonzero_only: bool,
    },
    Graph(WeightedGraph),
}

impl Source {
    fn shuffled_graph(&self, seed: u64) -> Result<WeightedGraph, ShuffleError> {
        match self {
            Source::Layers {
                shapes,
                values,
                nonzero_only,
            } => {
                let mut rng = rng_from_seed(seed);
                let matrices: Vec<DMatrix<f64>> = shapes
                    .iter()
                    .zip(values)
                    .map(|(&(rows, cols), v)| {
                        let mut v = v.clone();
                        permute(&mut v, *nonzero_only, &mut rng);
                        DMatrix::from_row_iterator(rows, cols, v.into_iter().map(f64::from))
                    })
                    .collect();
                Ok(graph::mlp_graph_unstripped(&matrices)?)
            }
            Source::Graph(g) => Ok(shuffle_graph_edges(g, seed)),
        }
    }
}

/// Clusters the input and `n_shuffles` shuffled counterparts with the same
/// spectral configuration. Shuffle `i` uses a seed derived from
/// `(config.seed, i)`, so the report does not depend on the thread count.
pub fn run_shuffle_test(
    input: ShuffleInput<'_>,
    config: &ShuffleConfig,
) -> Result<ShuffleReport, ShuffleError> {
    if config.n_shuffles == 0 {
        return Err(ShuffleError::NoShuffles);
    }
    config.spectral.validate()?;
    let (observed_graph, source) = match (input, config.method) {
        (ShuffleInput::Archive(a), ShuffleMethod::Layer | ShuffleMethod::LayerNonzero) => {
            let values = dense_layers(a, config.method)?;
            let shapes = a
                .layers()
                .iter()
                .map(|l| (l.shape[0], l.shape[1]))
                .collect();
            let source = Source::Layers {
                shapes,
                values,
                nonzero_only: config.method == ShuffleMethod::LayerNonzero,
            };
            (graph::mlp_to_graph(a)?, source)
        }
        (ShuffleInput::Archive(a), ShuffleMethod::GraphEdges) => {
            let g = archive_graph(a)?;
            (g.clone(), Source::Graph(g))
        }
        (ShuffleInput::Graph(g), ShuffleMethod::GraphEdges) => {
            let g = graph::strip_dead_nodes(g.clone())?;
            (g.clone(), Source::Graph(g))
        }
        (ShuffleInput::Graph(_), method) => return Err(ShuffleError::NeedsArchive(method)),
    };
    let observed = score(observed_graph, &config.spectral)?;

    let results: Vec<Result<Scored, ShuffleError>> = (0..config.n_shuffles)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(config.seed, STREAM_SHUFFLE, i as u64);
            score(source.shuffled_graph(seed)?, &config.spectral)
        })
        .collect();

    let mut shuffle_ncuts = Vec::new();
    let mut degenerate_shuffles = Vec::new();
    let mut failed_shuffles = Vec::new();
    for (index, result) in results.into_iter().enumerate() {
        match result {
            Ok(s) => {
                if s.degenerate {
                    degenerate_shuffles.push(index);
                }
                shuffle_ncuts.push(s.ncut);
            }
            Err(e) => failed_shuffles.push(FailedShuffle {
                index,
                reason: e.to_string(),
            }),
        }
    }
    if shuffle_ncuts.is_empty() {
        return Err(ShuffleError::AllShufflesFailed(
            failed_shuffles[0].reason.clone(),
        ));
    }
    Ok(ShuffleReport {
        method: config.method,
        observed_ncut: observed.ncut,
        p_value: p_value(observed.ncut, &shuffle_ncuts),
        z_score: z_score(observed.ncut, &shuffle_ncuts),
        shuffle_ncuts,
        n_shuffles: config.n_shuffles,
        seed: config.seed,
        spectral: config.spectral.clone(),
        observed_degenerate: observed.degenerate,
        degenerate_shuffles,
        failed_shuffles,
    })
}

/// Left one-sided permutation p-value `(r + 1) / (n + 1)`; ties count toward `r`.
pub fn p_value(observed: f64, shuffles: &[f64]) -> f64 {
    let r = shuffles.iter().filter(|&&s| s <= observed).count();
    (r + 1) as f64 / (shuffles.len() + 1) as f64
}

pub fn z_score(observed: f64, shuffles: &[f64]) -> Option<f64> {
    let n = shuffles.len();
    if n < 2 {
        return None;
    }
    let mean = shuffles.iter().sum::<f64>() / n as f64;
    let var = shuffles.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (std > 0.0).then(|| (observed - mean) / std)
}
