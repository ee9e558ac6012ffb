//! `slics`: fit concept dictionaries, decompose and retrieve embeddings,
//! and run the evaluation experiments from the command line.

mod commands;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slics::io::ExperimentConfig;
use slics::learn::{InitMethod, UpdateMode};
use slics::retrieval::Protocol;

use output::Format;

#[derive(Debug, Parser)]
#[command(name = "slics", version, about = "Concept-structured dictionaries for embedding spaces")]
struct Cli {
    /// Experiment configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "SLICS_THREADS")]
    threads: Option<usize>,
    /// Write the result table here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a dictionary on the training split and write a checkpoint.
    Fit(FitArgs),
    /// Train one dictionary per d0 and pick the best on the validation split.
    #[command(name = "sweep-d0")]
    SweepD0(SweepArgs),
    /// Split items into per-concept components.
    Decompose(DecomposeArgs),
    /// Rank the pool for one query item.
    Retrieve(RetrieveArgs),
    /// Filtered and unfiltered mAP@k over the query split.
    Eval(EvalArgs),
    /// Words best reconstructed by each concept's atoms.
    Caption(CaptionArgs),
    /// Quantize the pool with the token codebook and score queries by lookup.
    Quantize(QuantizeArgs),
    /// Row-normalized atom co-occurrence of non-negative sparse codes.
    Cooccur(CooccurArgs),
    /// Zero-shot multi-labels from concept prototypes.
    Pseudolabel(PseudolabelArgs),
    /// Orthogonal map between two paired embedding sets.
    Align(AlignArgs),
    /// Time the core operations on planted data.
    Bench(BenchArgs),
    /// Write a planted synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UpdateArg {
    Svd,
    Bcd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Svd,
    Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    General,
    SubLabel,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::General => Protocol::General,
            ProtocolArg::SubLabel => Protocol::SubLabel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Query,
    Pool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Atoms per concept.
    #[arg(long)]
    d0: Option<usize>,
    /// Epochs; 0 gives the supervised SVD baseline.
    #[arg(long)]
    iterations: Option<usize>,
    /// Mini-batch size; 0 is full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    update_mode: Option<UpdateArg>,
    #[arg(long)]
    power_iterations: Option<usize>,
    /// Reject atom updates that increase the error.
    #[arg(long)]
    monotone_check: bool,
    #[arg(long)]
    ridge_lambda: Option<f64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from the checkpoint in the directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    d0_min: Option<usize>,
    #[arg(long)]
    d0_max: Option<usize>,
    #[arg(long)]
    d0_step: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Query)]
    split: SplitArg,
    /// Item indices (into the dataset); overrides --split.
    #[arg(long, value_delimiter = ',')]
    items: Vec<usize>,
    /// Use every concept instead of the item's labels.
    #[arg(long)]
    all_concepts: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Needed for concept-filtered queries.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query item index.
    #[arg(long)]
    query: usize,
    /// Concept name for a filtered query.
    #[arg(long)]
    concept: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    protocol: Vec<ProtocolArg>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption one concept (by name) instead of all.
    #[arg(long)]
    concept: Option<String>,
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Manifest with tokenwise preprocessing and a codebook.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the quantized pool here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score the quantized pool against this query item.
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CooccurArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[arg(long)]
    max_atoms: Option<usize>,
    #[arg(long)]
    residual_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Active concepts per item.
    #[arg(long)]
    s_tilde: Option<usize>,
    /// Also write the labels as a label file (.csv or .json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Source embeddings X (container, one column per pair).
    #[arg(long)]
    source: PathBuf,
    /// Target embeddings Y.
    #[arg(long)]
    target: PathBuf,
    /// Write the rotation R (minimizing ||RX - Y||) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    concepts: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    concepts: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    atoms: usize,
    #[arg(long, default_value_t = 2000)]
    items: usize,
    #[arg(long, default_value_t = 3)]
    max_active: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Also write a tokenwise manifest with this many tokens and a codebook.
    #[arg(long)]
    tokens: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Core(slics::Error),
    Usage(String),
}

impl From<slics::Error> for CliError {
    fn from(e: slics::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message, path) = match self {
            CliError::Usage(m) => ("usage", m.clone(), None),
            CliError::Core(e) => (error_kind(e), e.to_string(), error_path(e)),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message, "path": path } })
    }
}

fn error_kind(e: &slics::Error) -> &'static str {
    use slics::Error as E;
    match e {
        E::Item { source, .. } => error_kind(source),
        E::Io { .. } => "io",
        E::Format { .. } => "format",
        E::HashMismatch { .. } => "hash_mismatch",
        E::DimensionMismatch { .. } => "dimension_mismatch",
        E::EmptyQuerySet(_) => "empty_query_set",
        E::Invalid(_) => "invalid",
        _ => "numerical",
    }
}

fn error_path(e: &slics::Error) -> Option<String> {
    use slics::Error as E;
    match e {
        E::Item { source, .. } => error_path(source),
        E::Io { path, .. } | E::Format { path, .. } | E::HashMismatch { path, .. } => {
            Some(path.display().to_string())
        }
        _ => None,
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolved configuration shared by every command.
pub struct Context {
    pub config: ExperimentConfig,
    pub format: Format,
}

impl Context {
    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }
}

fn apply_train(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    if let Some(v) = a.d0 {
        t.d0 = v;
        t.group_sizes = None;
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.update_mode {
        t.update_mode = match v {
            UpdateArg::Svd => UpdateMode::SimultaneousSvd,
            UpdateArg::Bcd => UpdateMode::AlternatingBcd,
        };
    }
    if let Some(v) = a.power_iterations {
        t.power_iterations = v;
    }
    if a.monotone_check {
        t.monotone_check = true;
    }
    if let Some(v) = a.ridge_lambda {
        t.ridge_lambda = v;
    }
    if let Some(v) = a.init {
        t.init = match v {
            InitArg::Svd => InitMethod::Svd,
            InitArg::Samples => InitMethod::RandomSamples,
        };
    }
}

fn configure(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Fit(a) => apply_train(&mut cfg, &a.train),
        Command::SweepD0(a) => {
            apply_train(&mut cfg, &a.train);
            let s = &mut cfg.sweep;
            s.d0_min = a.d0_min.unwrap_or(s.d0_min);
            s.d0_max = a.d0_max.unwrap_or(s.d0_max);
            s.d0_step = a.d0_step.unwrap_or(s.d0_step);
            cfg.eval.k = a.k.unwrap_or(cfg.eval.k);
        }
        Command::Eval(a) => {
            cfg.eval.k = a.k.unwrap_or(cfg.eval.k);
            if !a.protocol.is_empty() {
                cfg.eval.protocols = a.protocol.iter().map(|&p| p.into()).collect();
            }
        }
        Command::Retrieve(a) => cfg.eval.k = a.top_k.unwrap_or(cfg.eval.k),
        Command::Quantize(a) => cfg.eval.k = a.top_k.unwrap_or(cfg.eval.k),
        Command::Caption(a) => cfg.caption.top_n = a.top_n.unwrap_or(cfg.caption.top_n),
        Command::Cooccur(a) => {
            cfg.sparse.max_atoms = a.max_atoms.unwrap_or(cfg.sparse.max_atoms);
            cfg.sparse.residual_tol = a.residual_tol.unwrap_or(cfg.sparse.residual_tol);
        }
        Command::Pseudolabel(a) => {
            if a.s_tilde.is_some() {
                cfg.pseudo_label.s_tilde = a.s_tilde;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = configure(&cli)?;
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let ctx = Context {
        config,
        format: cli.format,
    };
    log::info!("config hash {} seed {}", ctx.hash(), ctx.seed());
    let table = match &cli.command {
        Command::Fit(a) => commands::fit(&ctx, a)?,
        Command::SweepD0(a) => commands::sweep_d0(&ctx, a)?,
        Command::Decompose(a) => commands::decompose(&ctx, a)?,
        Command::Retrieve(a) => commands::retrieve(&ctx, a)?,
        Command::Eval(a) => commands::eval(&ctx, a)?,
        Command::Caption(a) => commands::caption(&ctx, a)?,
        Command::Quantize(a) => commands::quantize(&ctx, a)?,
        Command::Cooccur(a) => commands::cooccur(&ctx, a)?,
        Command::Pseudolabel(a) => commands::pseudolabel(&ctx, a)?,
        Command::Align(a) => commands::align(&ctx, a)?,
        Command::Bench(a) => commands::bench(&ctx, a)?,
        Command::Synth(a) => commands::synth(&ctx, a)?,
    };
    let text = table.render(ctx.format, &ctx.hash(), ctx.seed());
    match &cli.output {
        Some(p) => slics::io::atomic_write(p, text.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Core(slics::Error::Io { path: "<stdout>".into(), source: e }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
