//! Eigenvalue regularizer for MLP clusterability and the √2 normalization pass.
//!
//! With `S = D^-1/2 A D^-1/2` and `L_sym = I - S`, a simple eigenvalue with
//! unit eigenvector `v` has `λ = 1 - vᵀ S v`. Differentiating through the
//! edge weight `a_pq = |W_nm|` and the two degrees it feeds gives
//!
//! ```text
//! ∂λ/∂W_nm = sgn(W_nm) · ( -2 v_p v_q / sqrt(d_p d_q) + v_p (Sv)_p / d_p + v_q (Sv)_q / d_q )
//! ```
//!
//! where `p` and `q` are the graph nodes of unit `n` in layer `s` and unit `m`
//! in layer `s + 1`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, GraphError, NodeId, WeightedGraph};
use crate::spectral::{smallest_eigenpairs, EigenOptions, Eigenpairs, SpectralError};
use crate::trainer::MlpModel;

/// Eigenvalues closer than this to a neighbour are treated as repeated.
pub const MIN_EIGENGAP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizerError {
    #[error("graph construction failed: {0}")]
    Graph(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("eigenvalue {index} is not simple (eigengap {gap:e}); its gradient is undefined")]
    DegenerateEigenvalue { index: usize, gap: f64 },
    #[error("eigenvalue index {index} out of range for a graph with {nodes} nodes")]
    IndexOutOfRange { index: usize, nodes: usize },
    #[error("invalid regularizer configuration: {0}")]
    InvalidConfig(String),
}

impl From<GraphError> for RegularizerError {
    fn from(e: GraphError) -> Self {
        RegularizerError::Graph(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// 1-based eigenvalue indices; index 1 is always 0 and is not allowed.
    pub eigen_indices: Vec<usize>,
    pub weight: f64,
    /// Recompute the regularizer gradient every this many optimizer steps and
    /// reuse the last one in between.
    pub recompute_every: u64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            eigen_indices: vec![2, 3, 4],
            weight: 0.1,
            recompute_every: 1,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<(), RegularizerError> {
        if self.eigen_indices.is_empty() || self.eigen_indices.iter().any(|&k| k < 2) {
            return Err(RegularizerError::InvalidConfig(format!(
                "eigen indices must be >= 2, got {:?}",
                self.eigen_indices
            )));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(RegularizerError::InvalidConfig(format!(
                "weight must be >= 0, got {}",
                self.weight
            )));
        }
        if self.recompute_every == 0 {
            return Err(RegularizerError::InvalidConfig(
                "recompute_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenGradient {
    /// 1-based eigenvalue index.
    pub index: usize,
    pub eigenvalue: f64,
    /// Distance to the nearest other computed eigenvalue.
    pub eigengap: f64,
    /// Unit-norm eigenvector of `L_sym`, indexed like `nodes`.
    pub eigenvector: Vec<f64>,
    /// Graph node of each eigenvector entry; `NodeId::layer` is the MLP layer.
    pub nodes: Vec<NodeId>,
    /// `∂λ/∂W^s`, same shapes as the model's weight matrices.
    pub layers: Vec<DMatrix<f64>>,
}

/// Eigen-decomposition of a model's graph, shared by several indices.
struct Spectrum {
    graph: WeightedGraph,
    index: HashMap<NodeId, usize>,
    pairs: Eigenpairs,
}

impl Spectrum {
    fn new(weights: &[DMatrix<f64>], max_index: usize) -> Result<Self, RegularizerError> {
        let graph = graph::mlp_graph(weights)?;
        if max_index > graph.len() {
            return Err(RegularizerError::IndexOutOfRange {
                index: max_index,
                nodes: graph.len(),
            });
        }
        // One extra pair so the gap above the largest index is known.
        let count = (max_index + 1).min(graph.len());
        let pairs = smallest_eigenpairs(&graph, count, &EigenOptions::default())?;
        Ok(Spectrum {
            index: graph.index_map(),
            graph,
            pairs,
        })
    }

    fn eigenvalue(&self, k: usize) -> f64 {
        self.pairs.values[k - 1]
    }

    fn gap(&self, k: usize) -> f64 {
        let values = &self.pairs.values;
        let i = k - 1;
        let below = if i > 0 {
            values[i] - values[i - 1]
        } else {
            f64::INFINITY
        };
        let above = values
            .get(i + 1)
            .map_or(f64::INFINITY, |&next| next - values[i]);
        below.min(above)
    }

    fn gradient(
        &self,
        weights: &[DMatrix<f64>],
        k: usize,
    ) -> Result<EigenGradient, RegularizerError> {
        let gap = self.gap(k);
        if gap < MIN_EIGENGAP {
            return Err(RegularizerError::DegenerateEigenvalue { index: k, gap });
        }
        let v: Vec<f64> = self
            .pairs
            .sym_vectors
            .column(k - 1)
            .iter()
            .copied()
            .collect();
        let d = self.graph.degrees();
        let inv_sqrt: Vec<f64> = d.iter().map(|x| x.sqrt().recip()).collect();
        // (Sv)_p = d_p^-1/2 Σ_j a_pj d_j^-1/2 v_j
        let scaled: Vec<f64> = v.iter().zip(&inv_sqrt).map(|(a, b)| a * b).collect();
        let mut av = vec![0.0; v.len()];
        self.graph.adjacency_mul(&scaled, &mut av);
        let degree_term: Vec<f64> = (0..v.len())
            .map(|p| v[p] * av[p] * inv_sqrt[p] / d[p])
            .collect();

        let layers = weights
            .iter()
            .enumerate()
            .map(|(s, w)| {
                let mut g = DMatrix::zeros(w.nrows(), w.ncols());
                for n in 0..w.nrows() {
                    let Some(&p) = self.index.get(&NodeId::new(s, n)) else {
                        continue;
                    };
                    for m in 0..w.ncols() {
                        let value = w[(n, m)];
                        if value == 0.0 {
                            continue;
                        }
                        let q = self.index[&NodeId::new(s + 1, m)];
                        let direct = -2.0 * v[p] * v[q] * inv_sqrt[p] * inv_sqrt[q];
                        g[(n, m)] = value.signum() * (direct + degree_term[p] + degree_term[q]);
                    }
                }
                g
            })
            .collect();
        Ok(EigenGradient {
            index: k,
            eigenvalue: self.eigenvalue(k),
            eigengap: gap,
            eigenvector: v,
            nodes: self.graph.nodes().to_vec(),
            layers,
        })
    }
}

/// Gradient of the `k`-th smallest (1-based) eigenvalue of the model graph's
/// normalized Laplacian with respect to every weight.
pub fn eigenvalue_gradient(model: &MlpModel, k: usize) -> Result<EigenGradient, RegularizerError> {
    eigenvalue_gradient_of(&model.weights, k)
}

pub fn eigenvalue_gradient_of(
    weights: &[DMatrix<f64>],
    k: usize,
) -> Result<EigenGradient, RegularizerError> {
    if k == 0 {
        return Err(RegularizerError::IndexOutOfRange { index: 0, nodes: 0 });
    }
    Spectrum::new(weights, k)?.gradient(weights, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerOutput {
    /// `weight · Σ λ_k` over all configured indices.
    pub loss: f64,
    pub eigenvalues: Vec<f64>,
    /// `weight · Σ ∂λ_k/∂W` over the indices whose eigenvalue is simple.
    pub gradients: Vec<DMatrix<f64>>,
    /// `(index, eigengap)` of indices left out of the gradient.
    pub skipped: Vec<(usize, f64)>,
}

pub fn regularizer_loss_and_grad(
    model: &MlpModel,
    config: &RegularizerConfig,
) -> Result<RegularizerOutput, RegularizerError> {
    config.validate()?;
    let weights = &model.weights;
    let mut gradients: Vec<DMatrix<f64>> = weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    if config.weight == 0.0 {
        return Ok(RegularizerOutput {
            loss: 0.0,
            eigenvalues: Vec::new(),
            gradients,
            skipped: Vec::new(),
        });
    }
    let max_index = *config
        .eigen_indices
        .iter()
        .max()
        .expect("validated non-empty");
    let spectrum = Spectrum::new(weights, max_index)?;
    let mut eigenvalues = Vec::new();
    let mut skipped = Vec::new();
    for &k in &config.eigen_indices {
        eigenvalues.push(spectrum.eigenvalue(k));
        match spectrum.gradient(weights, k) {
            Ok(g) => {
                for (acc, layer) in gradients.iter_mut().zip(&g.layers) {
                    *acc += layer * config.weight;
                }
            }
            Err(RegularizerError::DegenerateEigenvalue { index, gap }) => {
                log::warn!("skipping eigenvalue {index} in regularizer gradient: eigengap {gap:e}");
                skipped.push((index, gap));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RegularizerOutput {
        loss: config.weight * eigenvalues.iter().sum::<f64>(),
        eigenvalues,
        gradients,
        skipped,
    })
}

/// Rescales every hidden neuron so its incoming weights together with its bias
/// have Euclidean norm √2, compensating in the next layer's outgoing weights.
/// ReLU is positively homogeneous, so the network function is unchanged.
pub fn normalize_hidden_units(model: &MlpModel) -> MlpModel {
    let mut out = model.clone();
    let target = std::f64::consts::SQRT_2;
    for i in 0..out.weights.len().saturating_sub(1) {
        for n in 0..out.weights[i].ncols() {
            let incoming = out.weights[i].column(n).norm_squared();
            let x = (incoming + out.biases[i][n].powi(2)).sqrt();
            // Leaves already normalized neurons bit-identical.
            if (x - target).abs() <= 8.0 * f64::EPSILON * target {
                continue;
            }
            if x != 0.0 {
                let up = target / x;
                out.weights[i].column_mut(n).scale_mut(up);
                out.biases[i][n] *= up;
            }
            out.weights[i + 1].row_mut(n).scale_mut(x / target);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use crate::spectral::normalized_laplacian;
    use crate::trainer::{he_init, Head};
    use nalgebra::{DVector, SymmetricEigen};
    use rand::Rng as _;

    fn random_model(widths: &[usize], seed: u64) -> MlpModel {
        let mut m = he_init(widths, Head::Linear, seed).unwrap();
        let mut rng = rng_from_seed(seed ^ 0xabc);
        for b in &mut m.biases {
            b.apply(|x| *x = rng.random_range(-0.5..0.5));
        }
        m
    }

    fn dense_eigenvalues(weights: &[DMatrix<f64>]) -> Vec<f64> {
        let g = graph::mlp_graph(weights).unwrap();
        let (_, l_sym) = normalized_laplacian(&g).unwrap();
        let mut values: Vec<f64> = SymmetricEigen::new(l_sym)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        values.sort_by(f64::total_cmp);
        values
    }

    /// `Σ_ij v_i v_j ∂(L_sym)_ij/∂W_nm` with the derivative of every entry of
    /// `L_sym` written out densely.
    fn double_sum_gradient(weights: &[DMatrix<f64>], k: usize) -> Vec<DMatrix<f64>> {
        let g = graph::mlp_graph(weights).unwrap();
        let a = g.dense_adjacency();
        let d = g.degrees();
        let n = g.len();
        let (_, l_sym) = normalized_laplacian(&g).unwrap();
        let eig = SymmetricEigen::new(l_sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let v = eig.eigenvectors.column(order[k - 1]).clone_owned();
        let index = g.index_map();
        weights
            .iter()
            .enumerate()
            .map(|(s, w)| {
                DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| {
                    if w[(r, c)] == 0.0 {
                        return 0.0;
                    }
                    let p = index[&NodeId::new(s, r)];
                    let q = index[&NodeId::new(s + 1, c)];
                    let dd = |i: usize| if i == p || i == q { 1.0 } else { 0.0 };
                    let mut total = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            let da = if (i == p && j == q) || (i == q && j == p) {
                                1.0
                            } else {
                                0.0
                            };
                            let prod = d[i] * d[j];
                            let dprod = dd(i) * d[j] + d[i] * dd(j);
                            let dl =
                                -(da / prod.sqrt() - 0.5 * a[(i, j)] * prod.powf(-1.5) * dprod);
                            total += v[i] * v[j] * dl;
                        }
                    }
                    w[(r, c)].signum() * total
                })
            })
            .collect()
    }

    fn finite_difference(weights: &[DMatrix<f64>], k: usize, h: f64) -> Vec<DMatrix<f64>> {
        let mut w = weights.to_vec();
        (0..w.len())
            .map(|s| {
                DMatrix::from_fn(w[s].nrows(), w[s].ncols(), |r, c| {
                    let orig = w[s][(r, c)];
                    w[s][(r, c)] = orig + h;
                    let up = dense_eigenvalues(&w)[k - 1];
                    w[s][(r, c)] = orig - h;
                    let down = dense_eigenvalues(&w)[k - 1];
                    w[s][(r, c)] = orig;
                    (up - down) / (2.0 * h)
                })
            })
            .collect()
    }

    #[test]
    fn matches_dense_double_sum() {
        for seed in 0..5 {
            let m = random_model(&[3, 4, 2], seed);
            for k in 2..=4 {
                let g = eigenvalue_gradient(&m, k).unwrap();
                let oracle = double_sum_gradient(&m.weights, k);
                for (a, b) in g.layers.iter().zip(&oracle) {
                    assert!((a - b).abs().max() < 1e-10, "seed {seed} k {k}");
                }
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        let m = random_model(&[2, 3, 2], 7);
        for k in 2..=4 {
            let g = eigenvalue_gradient(&m, k).unwrap();
            let fd = finite_difference(&m.weights, k, 1e-5);
            for (a, b) in g.layers.iter().zip(&fd) {
                assert!((a - b).abs().max() < 1e-7, "k {k}");
            }
        }
    }

    #[test]
    fn radial_derivative_vanishes() {
        let m = random_model(&[4, 4, 4], 3);
        for k in 2..=4 {
            let g = eigenvalue_gradient(&m, k).unwrap();
            let radial: f64 = g.layers.iter().zip(&m.weights).map(|(a, w)| a.dot(w)).sum();
            assert!(radial.abs() < 1e-12, "radial {radial}");
        }
    }

    #[test]
    fn zero_weights_have_zero_gradient() {
        let mut m = random_model(&[3, 4, 3], 5);
        m.weights[0][(1, 2)] = 0.0;
        m.weights[1][(0, 0)] = 0.0;
        let g = eigenvalue_gradient(&m, 2).unwrap();
        assert_eq!(g.layers[0][(1, 2)], 0.0);
        assert_eq!(g.layers[1][(0, 0)], 0.0);
    }

    #[test]
    fn repeated_eigenvalue_is_refused() {
        // Two disjoint copies of the same layer: every eigenvalue is doubled.
        let w = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 2.0, 0.0, 0.0, 3.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 1.0,
            ],
        );
        let weights = vec![w];
        assert!(matches!(
            eigenvalue_gradient_of(&weights, 2),
            Err(RegularizerError::DegenerateEigenvalue { index: 2, .. })
        ));
        let m = MlpModel {
            masks: vec![DMatrix::from_element(4, 4, 1.0)],
            biases: vec![DVector::zeros(4)],
            weights,
            head: Head::Linear,
        };
        let config = RegularizerConfig {
            eigen_indices: vec![2],
            ..RegularizerConfig::default()
        };
        let out = regularizer_loss_and_grad(&m, &config).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.skipped.len(), 1);
        assert!(out.gradients[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_matches_independent_eigensolve() {
        let m = random_model(&[2, 3, 2], 11);
        let out = regularizer_loss_and_grad(&m, &RegularizerConfig::default()).unwrap();
        let values = dense_eigenvalues(&m.weights);
        let expected = 0.1 * (values[1] + values[2] + values[3]);
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_is_inert() {
        let m = random_model(&[2, 3, 2], 12);
        let config = RegularizerConfig {
            weight: 0.0,
            ..RegularizerConfig::default()
        };
        let out = regularizer_loss_and_grad(&m, &config).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.gradients.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn rejects_trivial_index() {
        let config = RegularizerConfig {
            eigen_indices: vec![1, 2],
            ..RegularizerConfig::default()
        };
        assert!(config.validate().is_err());
    }

    fn hidden_norms(m: &MlpModel) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..m.weights.len() - 1 {
            for n in 0..m.weights[i].ncols() {
                out.push((m.weights[i].column(n).norm_squared() + m.biases[i][n].powi(2)).sqrt());
            }
        }
        out
    }

    #[test]
    fn normalization_postcondition_and_idempotence() {
        let m = random_model(&[5, 6, 7, 3], 13);
        let once = normalize_hidden_units(&m);
        for x in hidden_norms(&once) {
            assert!((x - std::f64::consts::SQRT_2).abs() < 1e-12);
        }
        assert_eq!(normalize_hidden_units(&once), once);
    }

    #[test]
    fn normalization_preserves_function() {
        let m = random_model(&[4, 8, 8, 2], 14);
        let normalized = normalize_hidden_units(&m);
        let mut rng = rng_from_seed(15);
        let x = DMatrix::from_fn(100, 4, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let diff = (m.predict(&x).unwrap() - normalized.predict(&x).unwrap())
            .abs()
            .max();
        assert!(diff < 1e-12, "diff {diff}");
    }

    #[test]
    fn dead_neuron_output_path_is_cleared() {
        let mut m = random_model(&[3, 4, 2], 16);
        m.weights[0].column_mut(1).fill(0.0);
        m.biases[0][1] = 0.0;
        let normalized = normalize_hidden_units(&m);
        assert!(normalized.weights[0].column(1).iter().all(|&x| x == 0.0));
        assert!(normalized.weights[1].row(1).iter().all(|&x| x == 0.0));
    }
}
