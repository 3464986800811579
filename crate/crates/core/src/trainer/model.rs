use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::archive::{LayerData, LayerKind, WeightArchive};
use crate::graph::{self, WeightedGraph};
use crate::seed::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

impl LossKind {
    pub fn head(self) -> Head {
        match self {
            LossKind::CrossEntropy => Head::Softmax,
            LossKind::MeanSquaredError => Head::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(DMatrix<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(rows)),
        }
    }
}

/// ReLU MLP. `weights[s]` is `fan_in x fan_out`, entry `(n, m)` connects unit
/// `n` of layer `s` to unit `m` of layer `s + 1`. Masks hold 1 for live and 0
/// for pruned entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub masks: Vec<DMatrix<f64>>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| DVector::zeros(b.len()))
                .collect(),
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[s]` is the input to layer `s`; the first entry is the batch itself.
    pub activations: Vec<DMatrix<f64>>,
    /// Pre-activations of every layer, the last being the logits.
    pub preactivations: Vec<DMatrix<f64>>,
    /// Softmax probabilities or linear outputs.
    pub outputs: DMatrix<f64>,
    dropout: Option<Vec<DMatrix<f64>>>,
}

/// Inverted-dropout masks for each hidden layer (entries 0 or `1 / (1 - rate)`).
pub fn dropout_masks(
    model: &MlpModel,
    batch: usize,
    rate: f64,
    rng: &mut Rng,
) -> Vec<DMatrix<f64>> {
    use rand::Rng as _;
    let keep = 1.0 - rate;
    model.weights[..model.weights.len() - 1]
        .iter()
        .map(|w| {
            DMatrix::from_fn(batch, w.ncols(), |_, _| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        })
        .collect()
}

pub fn he_init(widths: &[usize], head: Head, seed: u64) -> Result<MlpModel, TrainError> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(TrainError::InvalidConfig(format!(
            "invalid widths {widths:?}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut masks = Vec::new();
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        // Filled row by row so the draw order matches the archive layout.
        let values: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| normal.sample(&mut rng))
            .collect();
        weights.push(DMatrix::from_row_slice(fan_in, fan_out, &values));
        biases.push(DVector::zeros(fan_out));
        masks.push(DMatrix::from_element(fan_in, fan_out, 1.0));
    }
    Ok(MlpModel {
        weights,
        biases,
        masks,
        head,
    })
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (mut col, &bias) in z.column_iter_mut().zip(b.iter()) {
        col.add_scalar_mut(bias);
    }
}

fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

impl MlpModel {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].nrows()];
        w.extend(self.weights.iter().map(|m| m.ncols()));
        w
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn apply_masks(&mut self) {
        for (w, m) in self.weights.iter_mut().zip(&self.masks) {
            w.component_mul_assign(m);
        }
    }

    /// Fraction of masked entries per layer.
    pub fn sparsity(&self) -> Vec<f64> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&x| x == 0.0).count() as f64 / m.len() as f64)
            .collect()
    }

    pub fn graph(&self) -> Result<WeightedGraph, graph::GraphError> {
        graph::mlp_graph(&self.weights)
    }

    pub fn forward(
        &self,
        inputs: &DMatrix<f64>,
        dropout: Option<Vec<DMatrix<f64>>>,
    ) -> Result<ForwardPass, TrainError> {
        if inputs.ncols() != self.weights[0].nrows() {
            return Err(TrainError::ShapeMismatch(format!(
                "input width {} != {}",
                inputs.ncols(),
                self.weights[0].nrows()
            )));
        }
        let last = self.weights.len() - 1;
        let mut activations = vec![inputs.clone()];
        let mut preactivations = Vec::with_capacity(self.weights.len());
        for (s, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = &activations[s] * w;
            add_bias(&mut z, b);
            if s < last {
                let mut a = z.map(|x| x.max(0.0));
                if let Some(masks) = &dropout {
                    a.component_mul_assign(&masks[s]);
                }
                activations.push(a);
            }
            preactivations.push(z);
        }
        let logits = &preactivations[last];
        let outputs = match self.head {
            Head::Linear => logits.clone(),
            Head::Softmax => softmax_rows(logits),
        };
        Ok(ForwardPass {
            activations,
            preactivations,
            outputs,
            dropout,
        })
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, TrainError> {
        Ok(self.forward(inputs, None)?.outputs)
    }

    pub fn loss(
        &self,
        pass: &ForwardPass,
        targets: &Targets,
        loss: LossKind,
    ) -> Result<f64, TrainError> {
        let out = &pass.outputs;
        let batch = out.nrows() as f64;
        match (loss, targets) {
            (LossKind::CrossEntropy, Targets::Classes(labels)) => Ok(-labels
                .iter()
                .enumerate()
                .map(|(i, &c)| out[(i, c)].max(1e-300).ln())
                .sum::<f64>()
                / batch),
            (LossKind::MeanSquaredError, Targets::Values(t)) => {
                Ok((out - t).map(|x| x * x).sum() / (batch * out.ncols() as f64))
            }
            _ => Err(TrainError::ShapeMismatch(
                "loss does not match target kind".into(),
            )),
        }
    }

    /// Gradient of the mean batch loss. Masked weight entries get zero gradient.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        targets: &Targets,
        loss: LossKind,
    ) -> Result<Gradients, TrainError> {
        let out = &pass.outputs;
        let batch = out.nrows();
        if targets.len() != batch {
            return Err(TrainError::ShapeMismatch(format!(
                "{} targets for batch of {batch}",
                targets.len()
            )));
        }
        let mut delta = match (loss, targets) {
            (LossKind::CrossEntropy, Targets::Classes(labels)) => {
                if self.head != Head::Softmax {
                    return Err(TrainError::ShapeMismatch(
                        "cross entropy needs a softmax head".into(),
                    ));
                }
                let mut d = out.clone();
                for (i, &c) in labels.iter().enumerate() {
                    if c >= d.ncols() {
                        return Err(TrainError::ShapeMismatch(format!("label {c} out of range")));
                    }
                    d[(i, c)] -= 1.0;
                }
                d / batch as f64
            }
            (LossKind::MeanSquaredError, Targets::Values(t)) => {
                if self.head != Head::Linear || t.shape() != out.shape() {
                    return Err(TrainError::ShapeMismatch(
                        "MSE needs linear outputs of target shape".into(),
                    ));
                }
                (out - t) * (2.0 / (batch * out.ncols()) as f64)
            }
            _ => {
                return Err(TrainError::ShapeMismatch(
                    "loss does not match target kind".into(),
                ))
            }
        };
        let mut grads = Gradients::zeros_like(self);
        for s in (0..self.weights.len()).rev() {
            grads.weights[s] = pass.activations[s].transpose() * &delta;
            grads.weights[s].component_mul_assign(&self.masks[s]);
            grads.biases[s] = delta.row_sum().transpose();
            if s > 0 {
                let mut upstream = &delta * self.weights[s].transpose();
                let z = &pass.preactivations[s - 1];
                upstream.zip_apply(z, |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                if let Some(masks) = &pass.dropout {
                    upstream.component_mul_assign(&masks[s - 1]);
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }

    pub fn from_archive(archive: &WeightArchive, head: Head) -> Result<Self, TrainError> {
        if archive.layers().is_empty() || !archive.is_dense_only() {
            return Err(TrainError::InvalidConfig(
                "archive must hold dense layers only".into(),
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, spec) in archive.layers().iter().enumerate() {
            debug_assert_eq!(spec.kind, LayerKind::Dense);
            weights.push(graph::dense_matrix(archive, i)?);
            let bias = archive.bias(i)?.unwrap_or_else(|| vec![0.0; spec.shape[1]]);
            biases.push(DVector::from_iterator(
                bias.len(),
                bias.iter().map(|&b| b as f64),
            ));
        }
        let masks = weights
            .iter()
            .map(|w| DMatrix::from_element(w.nrows(), w.ncols(), 1.0))
            .collect();
        Ok(MlpModel {
            weights,
            biases,
            masks,
            head,
        })
    }

    pub fn to_archive(&self) -> Result<WeightArchive, TrainError> {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .map(|(s, (w, b))| {
                let values: Vec<f32> = w.transpose().iter().map(|&x| x as f32).collect();
                LayerData::dense(format!("dense_{s}"), w.nrows(), w.ncols(), values)
                    .with_bias(b.iter().map(|&x| x as f32).collect())
            })
            .collect();
        Ok(WeightArchive::from_layers(layers)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(widths: &[usize], seed: u64) -> MlpModel {
        use rand::Rng as _;
        let mut m = he_init(widths, Head::Linear, seed).unwrap();
        let mut rng = rng_from_seed(seed + 1000);
        for b in &mut m.biases {
            b.apply(|x| *x = rng.random_range(-0.5..0.5));
        }
        m
    }

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    }

    /// Straightforward per-sample loops, independent of the matrix path.
    fn reference_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (s, (w, b)) in m.weights.iter().zip(&m.biases).enumerate() {
            let mut z = vec![0.0; w.ncols()];
            for j in 0..w.ncols() {
                z[j] = b[j];
                for i in 0..w.nrows() {
                    z[j] += a[i] * w[(i, j)];
                }
            }
            a = if s + 1 < m.weights.len() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        a
    }

    #[test]
    fn he_init_variance_and_biases() {
        let mut values = Vec::new();
        for seed in 0..500 {
            let m = he_init(&[4, 4], Head::Linear, seed).unwrap();
            values.extend(m.weights[0].iter().copied());
            assert!(m.biases[0].iter().all(|&b| b == 0.0));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Sample variance of N(0, 0.5) has standard error 0.5 * sqrt(2 / (n - 1)).
        let se = 0.5 * (2.0 / (n - 1.0)).sqrt();
        assert!((var - 0.5).abs() < 3.0 * se, "variance {var}");
        assert_eq!(
            he_init(&[3, 5, 2], Head::Linear, 9).unwrap(),
            he_init(&[3, 5, 2], Head::Linear, 9).unwrap()
        );
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = he_init(&[3, 6, 2], Head::Linear, 1).unwrap();
        let out = m.predict(&DMatrix::zeros(4, 3)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let m = MlpModel {
            weights: vec![DMatrix::identity(3, 3)],
            biases: vec![DVector::zeros(3)],
            masks: vec![DMatrix::from_element(3, 3, 1.0)],
            head: Head::Linear,
        };
        let x = random_inputs(5, 3, 2);
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn matches_reference_forward() {
        let m = random_model(&[4, 7, 5, 3], 3);
        let x = random_inputs(6, 4, 4);
        let out = m.predict(&x).unwrap();
        for r in 0..6 {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let expected = reference_forward(&m, &row);
            for (j, e) in expected.iter().enumerate() {
                assert!((out[(r, j)] - e).abs() < 1e-6);
            }
        }
    }

    fn check_fd(mut m: MlpModel, x: &DMatrix<f64>, t: &Targets, loss: LossKind) {
        let pass = m.forward(x, None).unwrap();
        let grads = m.backward(&pass, t, loss).unwrap();
        let h = 1e-6;
        for s in 0..m.weights.len() {
            for idx in 0..m.weights[s].len() {
                let orig = m.weights[s][idx];
                m.weights[s][idx] = orig + h;
                let up = m.loss(&m.forward(x, None).unwrap(), t, loss).unwrap();
                m.weights[s][idx] = orig - h;
                let down = m.loss(&m.forward(x, None).unwrap(), t, loss).unwrap();
                m.weights[s][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.weights[s][idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "layer {s} idx {idx}: fd {fd} analytic {an}");
            }
            for j in 0..m.biases[s].len() {
                let orig = m.biases[s][j];
                m.biases[s][j] = orig + h;
                let up = m.loss(&m.forward(x, None).unwrap(), t, loss).unwrap();
                m.biases[s][j] = orig - h;
                let down = m.loss(&m.forward(x, None).unwrap(), t, loss).unwrap();
                m.biases[s][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.biases[s][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "bias {s}/{j}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_mse() {
        let m = random_model(&[4, 5, 3], 5);
        let x = random_inputs(8, 4, 6);
        let t = Targets::Values(random_inputs(8, 3, 7));
        check_fd(m, &x, &t, LossKind::MeanSquaredError);
    }

    #[test]
    fn backward_matches_finite_differences_cross_entropy() {
        let mut m = random_model(&[4, 5, 3], 8);
        m.head = Head::Softmax;
        let x = random_inputs(8, 4, 9);
        let t = Targets::Classes(vec![0, 1, 2, 0, 1, 2, 2, 1]);
        check_fd(m, &x, &t, LossKind::CrossEntropy);
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let m = random_model(&[3, 4, 2], 10);
        let x = random_inputs(5, 3, 11);
        let pass = m.forward(&x, None).unwrap();
        let t = Targets::Values(pass.outputs.clone());
        let g = m.backward(&pass, &t, LossKind::MeanSquaredError).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn masked_entries_have_zero_gradient() {
        let mut m = random_model(&[3, 4, 2], 12);
        m.masks[0][(1, 2)] = 0.0;
        m.masks[1][(3, 0)] = 0.0;
        m.apply_masks();
        let x = random_inputs(5, 3, 13);
        let t = Targets::Values(random_inputs(5, 2, 14));
        let pass = m.forward(&x, None).unwrap();
        let g = m.backward(&pass, &t, LossKind::MeanSquaredError).unwrap();
        assert_eq!(g.weights[0][(1, 2)], 0.0);
        assert_eq!(g.weights[1][(3, 0)], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = he_init(&[3, 2], Head::Linear, 0).unwrap();
        assert!(matches!(
            m.forward(&DMatrix::zeros(2, 4), None),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn archive_round_trip_preserves_layout() {
        let m = random_model(&[2, 3, 2], 15);
        let archive = m.to_archive().unwrap();
        let w = archive.weights(0).unwrap();
        assert_eq!(w[1], m.weights[0][(0, 1)] as f32);
        assert_eq!(w[3], m.weights[0][(1, 0)] as f32);
        let back = MlpModel::from_archive(&archive, Head::Linear).unwrap();
        assert_eq!(back.widths(), vec![2, 3, 2]);
        assert!((back.weights[1].clone() - &m.weights[1]).abs().max() < 1e-6);
    }
}
