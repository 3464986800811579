use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::data::Dataset;
use super::model::{dropout_masks, LossKind, MlpModel, Targets};
use super::prune::{apply_pruning, sparsity_at, PruneSchedule};
use super::TrainError;
use crate::init::{apply_to_weights, InitTagging};
use crate::regularizer::{normalize_hidden_units, regularizer_loss_and_grad, RegularizerConfig};
use crate::seed::{derive_seed, rng_from_seed, STREAM_DROPOUT, STREAM_TRAIN};
use crate::spectral::{cluster_ncut, SpectralConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs_pre_prune: usize,
    pub epochs_prune: usize,
    pub batch_size: usize,
    pub dropout_rate: Option<f64>,
    pub loss: LossKind,
    pub seed: u64,
    /// Reshuffle the sample order every epoch. Off for memorization runs.
    pub shuffle_each_epoch: bool,
    /// Cluster the model graph every this many epochs (and after the last).
    pub ncut_every: Option<usize>,
    pub ncut_spectral: SpectralConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs_pre_prune: 10,
            epochs_prune: 10,
            batch_size: 64,
            dropout_rate: None,
            loss: LossKind::CrossEntropy,
            seed: 0,
            shuffle_each_epoch: true,
            ncut_every: None,
            ncut_spectral: SpectralConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        let ok = a.learning_rate > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0
            && self.batch_size >= 1
            && self.dropout_rate.is_none_or(|r| (0.0..1.0).contains(&r))
            && self.ncut_every != Some(0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    /// Cubic schedule spanning the pruning epochs, reaching the final sparsity
    /// on the last step.
    pub fn prune_schedule(&self, samples: usize) -> PruneSchedule {
        let per_epoch = self.steps_per_epoch(samples);
        let start = self.epochs_pre_prune as u64 * per_epoch;
        let end = (self.epochs_pre_prune + self.epochs_prune) as u64 * per_epoch;
        PruneSchedule::new(start, end.saturating_sub(1).max(start + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean task loss over the epoch's batches.
    pub loss: f64,
    /// Training accuracy of the model at the end of the epoch (classification only).
    pub accuracy: Option<f64>,
    pub regularizer_loss: Option<f64>,
    pub sparsity: Vec<f64>,
    pub ncut: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub metrics: Vec<EpochMetrics>,
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<Option<f64>, TrainError> {
    let Targets::Classes(labels) = &data.targets else {
        return Ok(None);
    };
    if labels.is_empty() {
        return Ok(None);
    }
    let out = model.predict(&data.inputs)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &c)| out.row(i).transpose().argmax().0 == c)
        .count();
    Ok(Some(correct as f64 / labels.len() as f64))
}

/// Trains `model` for `epochs_pre_prune + epochs_prune` epochs.
///
/// Each step runs forward and backward passes, adds the regularizer gradient
/// if one is given, takes an Adam step, renormalizes hidden units when
/// regularizing, and prunes on the schedule's update steps. A clusterable
/// tagging, if given, is applied to the weights before the first step.
pub fn train(
    mut model: MlpModel,
    data: &Dataset,
    config: &TrainConfig,
    schedule: Option<PruneSchedule>,
    regularizer: Option<&RegularizerConfig>,
    tagging: Option<&InitTagging>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if let Some(s) = &schedule {
        s.validate()?;
    }
    if let Some(r) = regularizer {
        r.validate()?;
    }
    if model.head != config.loss.head() {
        return Err(TrainError::InvalidConfig(format!(
            "{:?} loss needs a {:?} head",
            config.loss,
            config.loss.head()
        )));
    }
    if let Some(t) = tagging {
        apply_to_weights(&mut model.weights, t)?;
        model.apply_masks();
    }
    if data.is_empty() {
        return Err(TrainError::ShapeMismatch("empty dataset".into()));
    }
    let epochs = config.epochs_pre_prune + config.epochs_prune;
    let mut state = AdamState::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: u64 = 0;
    let mut metrics = Vec::with_capacity(epochs);
    let mut reg_grads: Option<Vec<nalgebra::DMatrix<f64>>> = None;

    for epoch in 1..=epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng_from_seed(derive_seed(
                config.seed,
                STREAM_TRAIN,
                epoch as u64,
            )));
        }
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(config.batch_size) {
            let batch = data.select(rows);
            let dropout = config.dropout_rate.map(|rate| {
                let mut rng = rng_from_seed(derive_seed(config.seed, STREAM_DROPOUT, step));
                dropout_masks(&model, rows.len(), rate, &mut rng)
            });
            let pass = model.forward(&batch.inputs, dropout)?;
            let loss = model.loss(&pass, &batch.targets, config.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, step, loss });
            }
            let mut grads = model.backward(&pass, &batch.targets, config.loss)?;
            if let Some(reg) = regularizer {
                if reg_grads.is_none() || step.is_multiple_of(reg.recompute_every) {
                    let out = regularizer_loss_and_grad(&model, reg)?;
                    reg_sum += out.loss;
                    reg_grads = Some(out.gradients);
                }
                for ((g, r), mask) in grads
                    .weights
                    .iter_mut()
                    .zip(reg_grads.as_ref().expect("set above"))
                    .zip(&model.masks)
                {
                    *g += r.component_mul(mask);
                }
            }
            adam_step(&mut model, &grads, &mut state, &config.adam);
            if regularizer.is_some() {
                model = normalize_hidden_units(&model);
            }
            if let Some(s) = &schedule {
                if s.is_update_step(step) {
                    apply_pruning(&mut model, sparsity_at(s, step));
                }
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let snapshot = config
            .ncut_every
            .is_some_and(|every| epoch % every == 0 || epoch == epochs);
        let ncut = if snapshot {
            Some(
                cluster_ncut(&model.graph()?, &config.ncut_spectral)
                    .map_err(crate::regularizer::RegularizerError::from)?
                    .1,
            )
        } else {
            None
        };
        metrics.push(EpochMetrics {
            epoch,
            step,
            loss: loss_sum / batches as f64,
            accuracy: accuracy(&model, data)?,
            regularizer_loss: regularizer.map(|_| reg_sum / batches as f64),
            sparsity: model.sparsity(),
            ncut,
        });
    }
    Ok(TrainOutcome { model, metrics })
}

/// One JSON object per line.
pub fn write_metrics_jsonl(
    metrics: &[EpochMetrics],
    mut out: impl Write,
) -> Result<(), TrainError> {
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| TrainError::Io(e.into()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}
