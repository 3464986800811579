use nnclust::archive::ArchiveError;
use nnclust::graph::GraphError;
use nnclust::init::InitError;
use nnclust::scenarios::ScenarioError;
use nnclust::shuffle::ShuffleError;
use nnclust::spectral::SpectralError;
use nnclust::trainer::TrainError;
use thiserror::Error;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("degenerate analysis: {0}")]
    Degenerate(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Degenerate(_) => EXIT_DEGENERATE,
            CliError::Training(_) => EXIT_TRAINING,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Empty => CliError::Degenerate(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::InvalidConfig(_) => CliError::Input(e.to_string()),
            _ => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<ShuffleError> for CliError {
    fn from(e: ShuffleError) -> Self {
        match e {
            ShuffleError::Archive(e) => e.into(),
            ShuffleError::Graph(e) => e.into(),
            ShuffleError::Spectral(e) => e.into(),
            ShuffleError::AllShufflesFailed(_) => CliError::Degenerate(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<InitError> for CliError {
    fn from(e: InitError) -> Self {
        match e {
            InitError::Archive(e) => e.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Shuffle(e) => e.into(),
            ScenarioError::Spectral(e) => e.into(),
            ScenarioError::Unknown(_) => CliError::Input(e.to_string()),
            ScenarioError::Train(e) => e.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Training(e.to_string())
    }
}
