//! Clusterable initialization: tag hidden units, then strengthen weights
//! between same-tag units and weaken weights between different tags.
//!
//! With `c` tags and `0 < β <= 1`, a hidden-to-hidden weight is multiplied by
//! `1 + (1 - β)(c - 1)` when both units share a tag and by `β` otherwise.
//! Under uniform tags the expected multiplier is exactly 1.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, WeightArchive};
use crate::graph::{self, GraphError};
use crate::seed::{derive_seed, rng_from_seed, STREAM_TAGS};

#[derive(Debug, Error)]
pub enum InitError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("clusterable init needs a dense-only archive")]
    NotDense,
    #[error("network has no hidden layers")]
    NoHiddenLayers,
    #[error("invalid tagging parameters: {0}")]
    InvalidConfig(String),
    #[error("tagging covers hidden widths {tagging:?} but the network has {network:?}")]
    Mismatch {
        tagging: Vec<usize>,
        network: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitTagging {
    pub c: usize,
    pub beta: f64,
    /// `tags[h][n]` in `0..c` is the tag of unit `n` of hidden layer `h`.
    pub tags: Vec<Vec<usize>>,
    pub seed: u64,
}

impl InitTagging {
    pub fn within_factor(&self) -> f64 {
        1.0 + (1.0 - self.beta) * (self.c as f64 - 1.0)
    }

    pub fn between_factor(&self) -> f64 {
        self.beta
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.tags.iter().map(Vec::len).collect()
    }
}

fn check_params(c: usize, beta: f64) -> Result<(), InitError> {
    if c == 0 {
        return Err(InitError::InvalidConfig("c must be >= 1".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(InitError::InvalidConfig(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    Ok(())
}

/// I.i.d. uniform tags for hidden layers of the given widths.
pub fn assign_tags_for_widths(
    hidden_widths: &[usize],
    c: usize,
    beta: f64,
    seed: u64,
) -> Result<InitTagging, InitError> {
    check_params(c, beta)?;
    if hidden_widths.is_empty() {
        return Err(InitError::NoHiddenLayers);
    }
    let mut rng = rng_from_seed(derive_seed(seed, STREAM_TAGS, 0));
    let tags = hidden_widths
        .iter()
        .map(|&w| (0..w).map(|_| rng.random_range(0..c)).collect())
        .collect();
    Ok(InitTagging {
        c,
        beta,
        tags,
        seed,
    })
}

fn dense_weights(archive: &WeightArchive) -> Result<Vec<DMatrix<f64>>, InitError> {
    if archive.layers().is_empty() || !archive.is_dense_only() {
        return Err(InitError::NotDense);
    }
    (0..archive.layers().len())
        .map(|i| Ok(graph::dense_matrix(archive, i)?))
        .collect()
}

fn hidden_widths_of(weights: &[DMatrix<f64>]) -> Vec<usize> {
    weights[..weights.len().saturating_sub(1)]
        .iter()
        .map(|w| w.ncols())
        .collect()
}

pub fn assign_tags(
    archive: &WeightArchive,
    c: usize,
    beta: f64,
    seed: u64,
) -> Result<InitTagging, InitError> {
    assign_tags_for_widths(&hidden_widths_of(&dense_weights(archive)?), c, beta, seed)
}

/// Rescales hidden-to-hidden weight matrices in place. Weights touching input
/// or output units are untouched.
pub fn apply_to_weights(
    weights: &mut [DMatrix<f64>],
    tagging: &InitTagging,
) -> Result<(), InitError> {
    check_params(tagging.c, tagging.beta)?;
    let network = hidden_widths_of(weights);
    if network != tagging.hidden_widths() {
        return Err(InitError::Mismatch {
            tagging: tagging.hidden_widths(),
            network,
        });
    }
    let (within, between) = (tagging.within_factor(), tagging.between_factor());
    // Weight layer s joins hidden layer s - 1 to hidden layer s for 1 <= s < S - 1.
    for s in 1..weights.len().saturating_sub(1) {
        let (from, to) = (&tagging.tags[s - 1], &tagging.tags[s]);
        let w = &mut weights[s];
        for n in 0..w.nrows() {
            for m in 0..w.ncols() {
                w[(n, m)] *= if from[n] == to[m] { within } else { between };
            }
        }
    }
    Ok(())
}

pub fn apply_clusterable_init(
    archive: &WeightArchive,
    tagging: &InitTagging,
) -> Result<WeightArchive, InitError> {
    let mut weights = dense_weights(archive)?;
    apply_to_weights(&mut weights, tagging)?;
    let mut out = archive.clone();
    let hidden_hidden = weights.len().saturating_sub(1);
    for (s, w) in weights.iter().enumerate().take(hidden_hidden).skip(1) {
        let values: Vec<f32> = w.transpose().iter().map(|&x| x as f32).collect();
        out = out.with_weights(s, &values)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{cluster_ncut, SpectralConfig};
    use crate::trainer::{he_init, Head};

    fn he_archive(widths: &[usize], seed: u64) -> WeightArchive {
        he_init(widths, Head::Linear, seed)
            .unwrap()
            .to_archive()
            .unwrap()
    }

    #[test]
    fn beta_one_and_single_tag_are_identities() {
        let a = he_archive(&[4, 6, 6, 6, 2], 1);
        let t = assign_tags(&a, 10, 1.0, 3).unwrap();
        assert_eq!(apply_clusterable_init(&a, &t).unwrap(), a);
        let t = assign_tags(&a, 1, 0.3, 3).unwrap();
        assert!(t.tags.iter().flatten().all(|&x| x == 0));
        assert_eq!(apply_clusterable_init(&a, &t).unwrap(), a);
    }

    #[test]
    fn tags_are_deterministic() {
        let a = assign_tags_for_widths(&[256, 256], 10, 0.6, 9).unwrap();
        assert_eq!(a, assign_tags_for_widths(&[256, 256], 10, 0.6, 9).unwrap());
        assert!(a.tags.iter().flatten().all(|&t| t < 10));
    }

    #[test]
    fn expected_multiplier_is_one() {
        for (c, beta) in [(10usize, 0.6), (3, 0.2), (7, 0.8)] {
            let cf = c as f64;
            let exact = (1.0 / cf) * (1.0 + (1.0 - beta) * (cf - 1.0)) + ((cf - 1.0) / cf) * beta;
            assert!((exact - 1.0).abs() < 1e-15);
            // Empirical average over 10^4 taggings of a single hidden-hidden edge.
            let mut total = 0.0;
            let trials = 10_000;
            for seed in 0..trials {
                let t = assign_tags_for_widths(&[1, 1], c, beta, seed).unwrap();
                total += if t.tags[0][0] == t.tags[1][0] {
                    t.within_factor()
                } else {
                    t.between_factor()
                };
            }
            let mean = total / trials as f64;
            let p = 1.0 / cf;
            let var = p * (1.0 - p) * (t_within(c, beta) - beta).powi(2);
            assert!(
                (mean - 1.0).abs() < 4.0 * (var / trials as f64).sqrt(),
                "c {c} beta {beta}: {mean}"
            );
        }
    }

    fn t_within(c: usize, beta: f64) -> f64 {
        1.0 + (1.0 - beta) * (c as f64 - 1.0)
    }

    #[test]
    fn only_hidden_hidden_weights_change() {
        let a = he_archive(&[3, 5, 5, 2], 4);
        let t = assign_tags(&a, 3, 0.5, 2).unwrap();
        let out = apply_clusterable_init(&a, &t).unwrap();
        assert_eq!(out.weights(0).unwrap(), a.weights(0).unwrap());
        assert_eq!(out.weights(2).unwrap(), a.weights(2).unwrap());
        let before = a.weights(1).unwrap();
        let after = out.weights(1).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.signum(), y.signum());
            assert!(*y != 0.0);
        }
    }

    #[test]
    fn mismatched_tagging_is_rejected() {
        let a = he_archive(&[3, 5, 5, 2], 4);
        let t = assign_tags_for_widths(&[5, 4], 3, 0.5, 2).unwrap();
        assert!(matches!(
            apply_clusterable_init(&a, &t),
            Err(InitError::Mismatch { .. })
        ));
        assert!(matches!(
            assign_tags(&he_archive(&[3, 2], 0), 2, 0.5, 0),
            Err(InitError::NoHiddenLayers)
        ));
    }

    #[test]
    fn lowers_ncut_for_most_seeds() {
        let c = 4;
        let config = SpectralConfig::with_k(c);
        let mut wins = 0;
        for seed in 0..20 {
            let a = he_archive(&[8, 32, 32, 32, 4], seed);
            let t = assign_tags(&a, c, 0.6, seed + 100).unwrap();
            let out = apply_clusterable_init(&a, &t).unwrap();
            let (_, before) = cluster_ncut(&graph::mlp_to_graph(&a).unwrap(), &config).unwrap();
            let (_, after) = cluster_ncut(&graph::mlp_to_graph(&out).unwrap(), &config).unwrap();
            if after <= before {
                wins += 1;
            }
        }
        assert!(wins > 10, "only {wins}/20 seeds improved");
    }
}
