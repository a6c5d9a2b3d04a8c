use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use diffuse_core::harness::{
    self, Corpus, ExperimentConfig, HarnessError, IterativeParams, ModelPair, NormParams, StrategySpec,
};
use diffuse_core::iterative::IterativeError;
use diffuse_core::oracle::{OracleError, ScoreOracle};
use diffuse_core::selection::{ClusterMethod, ClusterOptions, SelectionError};
use diffuse_core::synth::{self, SynthConfig};
use diffuse_core::vectors::VectorError;
use diffuse_core::{
    pair_space, run_iterative, select_diffuse, select_input_cluster, select_max_norm, select_random, EmbeddingFormat,
    EmbeddingMatrix, Outcome, Representative, ScoreTable, SessionConfig, SpaceMode, Strategy,
};
use thiserror::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(
    name = "diffuse",
    version,
    about = "Pick examples worth annotating and compare models on a budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose a fixed-size subset of examples to annotate.
    Select(SelectArgs),
    /// Compare two models by replaying stored scores as annotations.
    Compare(CompareArgs),
    /// Run a selection experiment over a corpus directory.
    Simulate(SimulateArgs),
    /// Serve annotation sessions over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic corpus and a matching experiment config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    embeddings_a: PathBuf,
    #[arg(long)]
    embeddings_b: PathBuf,
    #[arg(long, default_value = "subtract")]
    mode: SpaceMode,
    /// Scale every embedding to unit length before combining.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value = "diffuse")]
    strategy: Strategy,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ward-euclidean")]
    clustering: ClusterMethod,
    #[arg(long, default_value = "cosine-center")]
    representative: Representative,
    /// Input embeddings, required by `input-cluster`.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Where to write the plan; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    metric: String,
    /// Stop once the chance of the wrong winner is at most this.
    #[arg(long, default_value_t = 0.05)]
    risk: f64,
    #[arg(long, default_value_t = 5)]
    min: usize,
    /// Annotation cap; defaults to the pool size.
    #[arg(long)]
    max: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model name in the score file; defaults to the embedding file stem.
    #[arg(long)]
    model_a: Option<String>,
    #[arg(long)]
    model_b: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "sessions")]
    store_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 500)]
    pool: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a pair on which model A wins every example.
    #[arg(long)]
    unanimous: bool,
    /// Write embeddings in the packed binary format instead of JSONL.
    #[arg(long)]
    binary: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Vectors { path: PathBuf, source: VectorError },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("{path}: {source}")]
    Scores { path: PathBuf, source: OracleError },
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Iterative(#[from] IterativeError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Selection(SelectionError::ZeroBudget | SelectionError::BudgetExceedsPool { .. })
            | CliError::Iterative(IterativeError::InvalidConfig(_))
            | CliError::Harness(HarnessError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn read_matrix(path: &Path, normalize: bool) -> Result<EmbeddingMatrix, CliError> {
    let m = EmbeddingMatrix::read(open(path)?).map_err(|source| CliError::Vectors {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(if normalize { m.normalized() } else { m })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn select(args: SelectArgs) -> Result<ExitCode, CliError> {
    let a = read_matrix(&args.pair.embeddings_a, args.pair.normalize)?;
    let b = read_matrix(&args.pair.embeddings_b, args.pair.normalize)?;
    let space = pair_space(&a, &b, args.pair.mode)?;
    let options = ClusterOptions {
        method: args.clustering,
        representative: args.representative,
    };
    let plan = match args.strategy {
        Strategy::Diffuse => select_diffuse(&space, args.budget, options, args.seed)?,
        Strategy::Random => select_random(space.ids(), args.budget, args.seed)?,
        Strategy::MaxNorm => select_max_norm(&space, args.budget)?,
        Strategy::InputCluster => {
            let path = args
                .inputs
                .as_deref()
                .ok_or_else(|| CliError::Usage("--strategy input-cluster needs --inputs".into()))?;
            let inputs = read_matrix(path, args.pair.normalize)?;
            select_input_cluster(&inputs, args.budget, options, args.seed)?
        }
    };
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, &plan)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &plan)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(args: CompareArgs) -> Result<ExitCode, CliError> {
    let a = read_matrix(&args.pair.embeddings_a, args.pair.normalize)?;
    let b = read_matrix(&args.pair.embeddings_b, args.pair.normalize)?;
    let space = pair_space(&a, &b, args.pair.mode)?;
    let table = ScoreTable::read_jsonl(open(&args.scores)?).map_err(|source| CliError::Scores {
        path: args.scores.clone(),
        source,
    })?;
    let mut config = SessionConfig::new(args.risk, args.min, args.max.unwrap_or(space.len()));
    config.seed = args.seed;
    let mut oracle = ScoreOracle {
        table: &table,
        model_a: args.model_a.unwrap_or_else(|| stem(&args.pair.embeddings_a)),
        model_b: args.model_b.unwrap_or_else(|| stem(&args.pair.embeddings_b)),
        metric: args.metric,
    };
    let run = run_iterative(&space, config, &mut oracle)?;
    let counts = run.state.decision_counts();
    println!("outcome: {}", run.outcome);
    println!("annotations: {}", run.annotated_count);
    println!("risk: {}", run.state.current_risk);
    println!("counts: A={} B={} tie={}", counts.a, counts.b, counts.tie);
    Ok(if run.outcome == Outcome::Inconclusive {
        ExitCode::from(EXIT_INCONCLUSIVE)
    } else {
        ExitCode::SUCCESS
    })
}

fn simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    let config = ExperimentConfig::from_path(&args.config)?;
    let corpus = Corpus::load(&args.data_dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let result = pool.install(|| harness::run_experiment(&config, &corpus))?;
    result.write(&config, &args.out_dir)?;
    log::info!("wrote results to {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode, CliError> {
    let store = diffuse_service::Store::open(&args.store_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    let embed = diffuse_service::EmbedClient::from_env();
    if embed.is_none() {
        log::info!(
            "{} not set; sessions must supply embeddings",
            diffuse_service::embed::ENDPOINT_VAR
        );
    }
    let state = Arc::new(diffuse_service::AppState::new(store, embed));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        diffuse_service::serve(listener, state).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn synth(args: SynthArgs) -> Result<ExitCode, CliError> {
    let config = SynthConfig {
        pairs: args.pairs,
        pool: args.pool,
        dim: args.dim,
        noise: args.noise,
        unanimous: args.unanimous,
        seed: args.seed,
        ..SynthConfig::default()
    };
    if config.pool < 2 || config.dim == 0 || !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(CliError::Usage(
            "synthetic corpus needs --pool >= 2, --dim >= 1 and finite --noise >= 0".into(),
        ));
    }
    let corpus = synth::generate(&config);
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| ModelPair {
            model_a: p.model_a.clone(),
            model_b: p.model_b.clone(),
        })
        .collect();
    let metric = config.metric.clone();
    let format = if args.binary {
        EmbeddingFormat::RawBinary
    } else {
        EmbeddingFormat::Jsonl
    };
    Corpus::from(corpus).save(&args.out_dir, format)?;
    let budgets = [5, 10, 20, 50, 100, 200]
        .into_iter()
        .filter(|&b| b <= config.pool)
        .collect();
    let experiment = ExperimentConfig {
        strategies: vec![
            StrategySpec::new(Strategy::Diffuse),
            StrategySpec::new(Strategy::Random),
        ],
        budgets,
        seeds: (0..10).collect(),
        subset_fraction: 0.8,
        metric,
        pairs,
        mode: SpaceMode::Subtract,
        iterative: Some(IterativeParams {
            thresholds: vec![0.1, 0.2],
            n_min: 5,
            b_max: 200.min(config.pool),
            strategies: vec![harness::IterativeStrategy::Diffuse, harness::IterativeStrategy::Random],
        }),
        norms: Some(NormParams {
            k: 50.min(config.pool),
            ..NormParams::default()
        }),
    };
    let mut w = BufWriter::new(File::create(args.out_dir.join("experiment.json"))?);
    serde_json::to_writer_pretty(&mut w, &experiment)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Select(a) => select(a),
        Command::Compare(a) => compare(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code())
    })
}
