//! Normalized cut, its stub-sampling interpretation, and an exhaustive minimizer.

use rand::Rng as _;

use super::{Partition, SpectralError};
use crate::graph::WeightedGraph;
use crate::seed::rng_from_seed;

pub const BRUTE_FORCE_MAX_NODES: usize = 12;

/// Per-cluster `(cut, volume)` where cut = W(X, X̄) and volume = vol(X).
pub fn cluster_cuts(graph: &WeightedGraph, partition: &Partition) -> Vec<(f64, f64)> {
    let labels = partition.labels();
    let mut out = vec![(0.0, 0.0); partition.k()];
    for (i, &l) in labels.iter().enumerate() {
        out[l].1 += graph.degree(i);
    }
    for (i, j, w) in graph.edges() {
        if labels[i] != labels[j] {
            out[labels[i]].0 += w;
            out[labels[j]].0 += w;
        }
    }
    out
}

/// `Σ_i W(X_i, X̄_i) / vol(X_i)` over the non-empty clusters.
pub fn ncut(graph: &WeightedGraph, partition: &Partition) -> Result<f64, SpectralError> {
    check_partition(graph, partition)?;
    let sizes = partition.cluster_sizes();
    let mut total = 0.0;
    for (c, (cut, vol)) in cluster_cuts(graph, partition).into_iter().enumerate() {
        if sizes[c] == 0 {
            continue;
        }
        if vol <= 0.0 {
            return Err(SpectralError::ZeroVolume(c));
        }
        total += cut / vol;
    }
    Ok(total)
}

fn check_partition(graph: &WeightedGraph, partition: &Partition) -> Result<(), SpectralError> {
    if partition.labels().len() != graph.len() {
        return Err(SpectralError::PartitionMismatch {
            labels: partition.labels().len(),
            nodes: graph.len(),
        });
    }
    Ok(())
}

/// Monte-Carlo estimate of the stub procedure's failure probability: pick a
/// cluster uniformly, then a stub attached to it with probability proportional
/// to its weight; the draw fails when the stub's edge leaves the cluster. The
/// exact probability is `ncut / k`.
pub fn ncut_stub_estimate(
    graph: &WeightedGraph,
    partition: &Partition,
    samples: usize,
    seed: u64,
) -> Result<f64, SpectralError> {
    check_partition(graph, partition)?;
    if samples == 0 {
        return Err(SpectralError::InvalidConfig("samples must be >= 1".into()));
    }
    let labels = partition.labels();
    // Stubs of each cluster: cumulative weight and whether the edge crosses out.
    let mut stubs: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); partition.k()];
    for (i, j, w) in graph.edges() {
        let crosses = labels[i] != labels[j];
        for end in [i, j] {
            let (cum, cross) = &mut stubs[labels[end]];
            cum.push(cum.last().copied().unwrap_or(0.0) + w);
            cross.push(crosses);
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut failures = 0usize;
    for _ in 0..samples {
        let (cum, cross) = &stubs[rng.random_range(0..partition.k())];
        let Some(&total) = cum.last() else { continue };
        let target = rng.random::<f64>() * total;
        let idx = cum.partition_point(|&c| c <= target).min(cum.len() - 1);
        if cross[idx] {
            failures += 1;
        }
    }
    Ok(failures as f64 / samples as f64)
}

/// Exact minimum n-cut over partitions into exactly `k` non-empty parts.
///
/// Enumerates restricted-growth strings, maintaining per-part volume and
/// internal weight incrementally.
pub fn brute_force_min_ncut(
    graph: &WeightedGraph,
    k: usize,
) -> Result<(Partition, f64), SpectralError> {
    let n = graph.len();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(SpectralError::TooLarge {
            nodes: n,
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    if k == 0 || k > n {
        return Err(SpectralError::TooFewNodes { nodes: n, k });
    }
    let adjacency = graph.dense_adjacency();
    let mut search = Search {
        graph,
        adjacency: &adjacency,
        k,
        labels: vec![0; n],
        volume: vec![0.0; k],
        internal: vec![0.0; k],
        best: f64::INFINITY,
        best_labels: vec![0; n],
    };
    search.recurse(0, 0);
    let partition = Partition::new(search.best_labels, k)?;
    Ok((partition, search.best))
}

struct Search<'a> {
    graph: &'a WeightedGraph,
    adjacency: &'a nalgebra::DMatrix<f64>,
    k: usize,
    labels: Vec<usize>,
    volume: Vec<f64>,
    internal: Vec<f64>,
    best: f64,
    best_labels: Vec<usize>,
}

impl Search<'_> {
    fn recurse(&mut self, node: usize, used: usize) {
        let n = self.labels.len();
        if node == n {
            if used == self.k {
                let value: f64 = (0..self.k)
                    .map(|c| (self.volume[c] - 2.0 * self.internal[c]) / self.volume[c])
                    .sum();
                if value < self.best {
                    self.best = value;
                    self.best_labels = self.labels.clone();
                }
            }
            return;
        }
        // Not enough nodes left to open the remaining parts.
        if self.k - used > n - node {
            return;
        }
        let max_label = used.min(self.k - 1);
        for c in 0..=max_label {
            let gain: f64 = (0..node)
                .filter(|&j| self.labels[j] == c)
                .map(|j| self.adjacency[(node, j)])
                .sum();
            self.labels[node] = c;
            self.volume[c] += self.graph.degree(node);
            self.internal[c] += gain;
            self.recurse(node + 1, used.max(c + 1));
            self.volume[c] -= self.graph.degree(node);
            self.internal[c] -= gain;
        }
    }
}
