//! Named end-to-end experiments: generate data, train, prune, and measure
//! clusterability of the result.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::assign_tags_for_widths;
use crate::regularizer::RegularizerConfig;
use crate::shuffle::{run_shuffle_test, ShuffleConfig, ShuffleError, ShuffleInput, ShuffleReport};
use crate::spectral::{cluster_ncut, SpectralConfig, SpectralError};
use crate::trainer::{
    accuracy, gen_polynomial_dataset, gen_prototype_dataset, gen_random_dataset, he_init, train,
    Dataset, EpochMetrics, LossKind, MlpModel, Targets, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("unknown scenario {0:?}")]
    Unknown(String),
}

impl ScenarioError {
    /// True when the failure happened while training rather than analysing.
    pub fn is_training_failure(&self) -> bool {
        matches!(self, ScenarioError::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Random pixels and labels, reshuffled every epoch, with dropout.
    RandomUnlearnable,
    /// A small random dataset presented in a fixed order until memorized.
    Memorize,
    /// Regression onto all 512 polynomials with 0/1 coefficients.
    PolyRegression,
    /// Noisy-prototype classification with the eigenvalue regularizer.
    Regularized,
    /// Noisy-prototype classification from a clusterable initialization.
    ClusterableInit,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::RandomUnlearnable,
        Scenario::Memorize,
        Scenario::PolyRegression,
        Scenario::Regularized,
        Scenario::ClusterableInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::RandomUnlearnable => "random-unlearnable",
            Scenario::Memorize => "memorize",
            Scenario::PolyRegression => "poly-regression",
            Scenario::Regularized => "regularized",
            Scenario::ClusterableInit => "clusterable-init",
        }
    }

    pub fn experiment(self, seed: u64) -> Experiment {
        let base = Experiment::prototype(seed);
        match self {
            Scenario::RandomUnlearnable => Experiment {
                task: Task::Random {
                    train: 10_000,
                    side: 14,
                    classes: 10,
                },
                train: TrainConfig {
                    batch_size: 128,
                    dropout_rate: Some(0.5),
                    ..base.train.clone()
                },
                ..base.wide()
            },
            Scenario::Memorize => Experiment {
                task: Task::Random {
                    train: 3000,
                    side: 14,
                    classes: 10,
                },
                train: TrainConfig {
                    epochs_pre_prune: 100,
                    epochs_prune: 100,
                    batch_size: 128,
                    shuffle_each_epoch: false,
                    ..base.train.clone()
                },
                ..base.wide()
            },
            Scenario::PolyRegression => Experiment {
                task: Task::Polynomial {
                    train: 4096,
                    test: 1024,
                },
                train: TrainConfig {
                    loss: LossKind::MeanSquaredError,
                    epochs_pre_prune: 10,
                    epochs_prune: 10,
                    ..base.train.clone()
                },
                ..base
            },
            Scenario::Regularized => Experiment {
                regularizer: Some(RegularizerConfig::default()),
                ..base
            },
            Scenario::ClusterableInit => Experiment {
                init: Some(InitSettings { c: 10, beta: 0.6 }),
                ..base
            },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| ScenarioError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    /// Noisy class prototypes in `[0, 1]^dim`.
    Prototype {
        train: usize,
        test: usize,
        dim: usize,
        classes: usize,
        noise: f64,
    },
    /// Uniform random `side x side` images with random labels; no test set.
    Random {
        train: usize,
        side: usize,
        classes: usize,
    },
    Polynomial {
        train: usize,
        test: usize,
    },
}

impl Task {
    /// `(train, test)`; the test set may be empty.
    pub fn generate(&self, seed: u64) -> (Dataset, Dataset) {
        match *self {
            Task::Prototype {
                train,
                test,
                dim,
                classes,
                noise,
            } => gen_prototype_dataset(train + test, dim, classes, noise, seed).split(train),
            Task::Random {
                train,
                side,
                classes,
            } => gen_random_dataset(train, side, side, classes, seed).split(train),
            Task::Polynomial { train, test } => {
                gen_polynomial_dataset(train + test, seed).split(train)
            }
        }
    }

    pub fn widths(&self, hidden: &[usize]) -> Vec<usize> {
        let (input, output) = match *self {
            Task::Prototype { dim, classes, .. } => (dim, classes),
            Task::Random { side, classes, .. } => (side * side, classes),
            Task::Polynomial { .. } => (2, crate::trainer::POLYNOMIAL_OUTPUTS),
        };
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSettings {
    pub c: usize,
    pub beta: f64,
}

/// Everything needed to reproduce one training run and its analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub seed: u64,
    pub task: Task,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Run the cubic pruning schedule during the pruning epochs.
    pub prune: bool,
    pub regularizer: Option<RegularizerConfig>,
    pub init: Option<InitSettings>,
    pub spectral: SpectralConfig,
    /// Shuffle test on the final network; `None` skips it.
    pub shuffle: Option<ShuffleConfig>,
}

impl Experiment {
    /// Pruned three-layer width-64 MLP on a 10-class noisy-prototype task.
    pub fn prototype(seed: u64) -> Self {
        let spectral = SpectralConfig {
            seed,
            ..SpectralConfig::default()
        };
        Experiment {
            seed,
            task: Task::Prototype {
                train: 2000,
                test: 500,
                dim: 49,
                classes: 10,
                noise: 0.35,
            },
            hidden: vec![64, 64, 64],
            train: TrainConfig {
                epochs_pre_prune: 10,
                epochs_prune: 10,
                batch_size: 64,
                seed,
                ..TrainConfig::default()
            },
            prune: true,
            regularizer: None,
            init: None,
            shuffle: Some(ShuffleConfig {
                seed,
                spectral: spectral.clone(),
                ..ShuffleConfig::default()
            }),
            spectral,
        }
    }

    /// Three hidden layers of 256 units, clustered with the Lanczos solver.
    fn wide(self) -> Self {
        let spectral = SpectralConfig {
            dense_threshold: 300,
            ..self.spectral
        };
        Experiment {
            hidden: vec![256; 3],
            shuffle: self.shuffle.map(|s| ShuffleConfig {
                spectral: spectral.clone(),
                ..s
            }),
            spectral,
            ..self
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_mse: Option<f64>,
    /// MSE of predicting each output's test-set mean.
    pub baseline_mse: Option<f64>,
    pub ncut: f64,
    pub cluster_sizes: Vec<usize>,
    pub shuffle: Option<ShuffleReport>,
    pub metrics: Vec<EpochMetrics>,
    #[serde(skip)]
    pub model: Option<MlpModel>,
}

fn mse(model: &MlpModel, data: &Dataset) -> Result<Option<(f64, f64)>, TrainError> {
    let Targets::Values(t) = &data.targets else {
        return Ok(None);
    };
    if t.nrows() == 0 {
        return Ok(None);
    }
    let out = model.predict(&data.inputs)?;
    let cells = t.len() as f64;
    let err = (out - t).map(|x| x * x).sum() / cells;
    let mut baseline = 0.0;
    for col in t.column_iter() {
        let mean = col.mean();
        baseline += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    Ok(Some((err, baseline / cells)))
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentResult, ScenarioError> {
    let (train_set, test_set) = exp.task.generate(exp.seed);
    let widths = exp.task.widths(&exp.hidden);
    let model = he_init(&widths, exp.train.loss.head(), exp.seed)?;
    let tagging = match exp.init {
        Some(InitSettings { c, beta }) => {
            Some(assign_tags_for_widths(&exp.hidden, c, beta, exp.seed).map_err(TrainError::from)?)
        }
        None => None,
    };
    let schedule = exp.prune.then(|| exp.train.prune_schedule(train_set.len()));
    let outcome = train(
        model,
        &train_set,
        &exp.train,
        schedule,
        exp.regularizer.as_ref(),
        tagging.as_ref(),
    )?;
    let model = outcome.model;
    let graph = model.graph().map_err(TrainError::from)?;
    let (partition, ncut) = cluster_ncut(&graph, &exp.spectral)?;
    let shuffle = match &exp.shuffle {
        Some(config) => {
            let archive = model.to_archive()?;
            Some(run_shuffle_test(ShuffleInput::Archive(&archive), config)?)
        }
        None => None,
    };
    let test_mse = mse(&model, &test_set)?;
    Ok(ExperimentResult {
        train_accuracy: accuracy(&model, &train_set)?,
        test_accuracy: if test_set.is_empty() {
            None
        } else {
            accuracy(&model, &test_set)?
        },
        test_mse: test_mse.map(|m| m.0),
        baseline_mse: test_mse.map(|m| m.1),
        ncut,
        cluster_sizes: partition.cluster_sizes(),
        shuffle,
        metrics: outcome.metrics,
        model: Some(model),
    })
}

pub fn run_scenario(scenario: Scenario, seed: u64) -> Result<ExperimentResult, ScenarioError> {
    run_experiment(&scenario.experiment(seed))
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
