mod error;
mod report;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nnclust::archive::{write_archive, WeightArchive};
use nnclust::graph::{cnn_to_graph, mlp_to_graph, WeightedGraph};
use nnclust::init::{apply_clusterable_init, assign_tags};
use nnclust::scenarios::{run_experiment, Scenario};
use nnclust::shuffle::{run_shuffle_test, ShuffleConfig, ShuffleInput, ShuffleMethod};
use nnclust::spectral::{cluster_ncut, SpectralConfig};
use nnclust::trainer::write_metrics_jsonl;

use error::CliError;
use report::{
    AnalysisReport, GraphKind, GraphSummary, InputDigest, PartitionSummary, Timing, TrainingSummary,
};

#[derive(Debug, Parser)]
#[command(
    name = "nnclust",
    version,
    about = "Spectral clusterability analysis of neural network weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphChoice {
    /// MLP graph for dense-only archives, channel graph otherwise.
    Auto,
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodChoice {
    Layer,
    Nonzero,
    GraphEdges,
}

impl From<MethodChoice> for ShuffleMethod {
    fn from(m: MethodChoice) -> Self {
        match m {
            MethodChoice::Layer => ShuffleMethod::Layer,
            MethodChoice::Nonzero => ShuffleMethod::LayerNonzero,
            MethodChoice::GraphEdges => ShuffleMethod::GraphEdges,
        }
    }
}

#[derive(Debug, clap::Args)]
struct ClusterArgs {
    /// Input NWA archive.
    #[arg(long)]
    weights: PathBuf,
    /// Number of clusters.
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GraphChoice::Auto)]
    graph: GraphChoice,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    kmeans_restarts: u64,
    /// Graphs with at least this many nodes use the iterative eigensolver.
    #[arg(long, default_value_t = 2000)]
    dense_threshold: usize,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Include wall-clock timing in the report.
    #[arg(long)]
    timing: bool,
}

impl ClusterArgs {
    fn spectral(&self) -> SpectralConfig {
        SpectralConfig {
            k: self.k as usize,
            kmeans_restarts: self.kmeans_restarts as usize,
            seed: self.seed,
            dense_threshold: self.dense_threshold,
            ..SpectralConfig::default()
        }
    }
}

#[derive(Debug, clap::Args)]
struct JobsArg {
    /// Worker threads for shuffles and k-means restarts. Results do not depend on it.
    #[arg(long, env = "NNCLUST_JOBS", value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spectrally cluster an archive's graph and report its n-cut.
    Cluster(ClusterArgs),
    /// Compare the observed n-cut with n-cuts of shuffled networks.
    ShuffleTest {
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        n_shuffles: u64,
        #[arg(long, value_enum, default_value_t = MethodChoice::Layer)]
        method: MethodChoice,
        #[command(flatten)]
        jobs: JobsArg,
    },
    /// Rescale hidden-hidden weights of a dense archive by random unit tags.
    InitTransform {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Number of tags.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        c: u64,
        /// Between-tag multiplier in (0, 1].
        #[arg(long, default_value_t = 0.6)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a named scenario end to end and analyse the result.
    TrainDemo {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving model.nwa, metrics.jsonl and report.json.
        #[arg(long, default_value = "train-demo-out")]
        out_dir: PathBuf,
        /// Override the scenario's shuffle count.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_shuffles: Option<u64>,
        #[command(flatten)]
        jobs: JobsArg,
        #[arg(long)]
        timing: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<ExitCode, CliError> {
    let started = Instant::now();
    match command {
        Command::Cluster(args) => {
            let (archive, digest) = load(&args.weights)?;
            let (kind, graph) = build_graph(&archive, args.graph)?;
            let spectral = args.spectral();
            let (partition, ncut) = cluster_ncut(&graph, &spectral)?;
            let report = AnalysisReport {
                schema_version: report::SCHEMA_VERSION,
                tool: env!("CARGO_PKG_NAME").into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                command: "cluster".into(),
                input: Some(digest),
                graph: GraphSummary::of(kind, &graph),
                spectral,
                partition: PartitionSummary::of(&graph, &partition),
                ncut,
                shuffle: None,
                training: None,
                timing: args.timing.then(|| timing(started)),
            };
            emit(&report, args.output.as_deref())?;
            Ok(finish(&report))
        }
        Command::ShuffleTest {
            cluster: args,
            n_shuffles,
            method,
            jobs,
        } => with_jobs(&jobs, || {
            let (archive, digest) = load(&args.weights)?;
            let method = ShuffleMethod::from(method);
            let (kind, graph) = build_graph(&archive, args.graph)?;
            let layered = method != ShuffleMethod::GraphEdges;
            if layered && kind == GraphKind::Cnn {
                return Err(CliError::Input(format!(
                    "method {method:?} permutes dense layers; use graph-edges for channel graphs"
                )));
            }
            let spectral = args.spectral();
            let (partition, ncut) = cluster_ncut(&graph, &spectral)?;
            let config = ShuffleConfig {
                method,
                n_shuffles: n_shuffles as usize,
                seed: args.seed,
                spectral: spectral.clone(),
            };
            let input = if layered {
                ShuffleInput::Archive(&archive)
            } else {
                ShuffleInput::Graph(&graph)
            };
            let shuffle = run_shuffle_test(input, &config)?;
            let report = AnalysisReport {
                schema_version: report::SCHEMA_VERSION,
                tool: env!("CARGO_PKG_NAME").into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                command: "shuffle-test".into(),
                input: Some(digest),
                graph: GraphSummary::of(kind, &graph),
                spectral,
                partition: PartitionSummary::of(&graph, &partition),
                ncut,
                shuffle: Some(shuffle),
                training: None,
                timing: args.timing.then(|| timing(started)),
            };
            emit(&report, args.output.as_deref())?;
            Ok(finish(&report))
        }),
        Command::InitTransform {
            weights,
            output,
            c,
            beta,
            seed,
        } => {
            let (archive, _) = load(&weights)?;
            let tagging = assign_tags(&archive, c as usize, beta, seed)?;
            let out = apply_clusterable_init(&archive, &tagging)?;
            write_archive(&out, &output)?;
            log::info!("wrote {} (c = {c}, beta = {beta})", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainDemo {
            scenario,
            seed,
            out_dir,
            n_shuffles,
            jobs,
            timing: with_timing,
        } => with_jobs(&jobs, || {
            let mut experiment = scenario.experiment(seed);
            if let (Some(n), Some(shuffle)) = (n_shuffles, experiment.shuffle.as_mut()) {
                shuffle.n_shuffles = n as usize;
            }
            let result = run_experiment(&experiment)?;
            let model = result
                .model
                .as_ref()
                .expect("experiments return their model");
            let archive = model.to_archive()?;
            let graph = model.graph()?;
            let (partition, ncut) = cluster_ncut(&graph, &experiment.spectral)?;

            fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
            let archive_path = out_dir.join("model.nwa");
            write_archive(&archive, &archive_path)?;
            let metrics_path = out_dir.join("metrics.jsonl");
            let file =
                fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
            write_metrics_jsonl(&result.metrics, std::io::BufWriter::new(file))
                .map_err(|e| CliError::io(&metrics_path, e))?;

            let bytes = fs::read(&archive_path).map_err(|e| CliError::io(&archive_path, e))?;
            let report = AnalysisReport {
                schema_version: report::SCHEMA_VERSION,
                tool: env!("CARGO_PKG_NAME").into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                command: "train-demo".into(),
                input: Some(InputDigest::of(&archive_path, &bytes)),
                graph: GraphSummary::of(GraphKind::Mlp, &graph),
                spectral: experiment.spectral.clone(),
                partition: PartitionSummary::of(&graph, &partition),
                ncut,
                shuffle: result.shuffle.clone(),
                training: Some(TrainingSummary::new(scenario, experiment, &result)),
                timing: with_timing.then(|| timing(started)),
            };
            emit(&report, Some(&out_dir.join("report.json")))?;
            emit(&report, None)?;
            Ok(finish(&report))
        }),
    }
}

fn timing(started: Instant) -> Timing {
    Timing {
        total_seconds: started.elapsed().as_secs_f64(),
    }
}

fn load(path: &Path) -> Result<(WeightArchive, InputDigest), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let archive = WeightArchive::from_bytes(&bytes).map_err(|e| CliError::io(path, e))?;
    if archive.layers().is_empty() {
        return Err(CliError::Input(format!(
            "{}: archive has no layers",
            path.display()
        )));
    }
    Ok((archive, InputDigest::of(path, &bytes)))
}

fn build_graph(
    archive: &WeightArchive,
    choice: GraphChoice,
) -> Result<(GraphKind, WeightedGraph), CliError> {
    let kind = match choice {
        GraphChoice::Mlp => GraphKind::Mlp,
        GraphChoice::Cnn => GraphKind::Cnn,
        GraphChoice::Auto if archive.is_dense_only() => GraphKind::Mlp,
        GraphChoice::Auto => GraphKind::Cnn,
    };
    let graph = match kind {
        GraphKind::Mlp => mlp_to_graph(archive)?,
        GraphKind::Cnn => cnn_to_graph(archive)?,
    };
    Ok((kind, graph))
}

fn with_jobs<T: Send>(
    jobs: &JobsArg,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    let Some(n) = jobs.jobs else {
        return f();
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n as usize)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start {n} worker threads: {e}")))?
        .install(f)
}

fn emit(report: &AnalysisReport, path: Option<&Path>) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(report).expect("reports serialize");
    json.push('\n');
    match path {
        Some(path) => fs::write(path, json).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| CliError::Input(format!("stdout: {e}"))),
    }
}

/// Success unless the clustering itself left a cluster empty.
fn finish(report: &AnalysisReport) -> ExitCode {
    if report.partition.empty_clusters > 0 {
        eprintln!(
            "error: degenerate analysis: {} of {} clusters are empty",
            report.partition.empty_clusters, report.partition.k
        );
        return ExitCode::from(error::EXIT_DEGENERATE);
    }
    ExitCode::SUCCESS
}
