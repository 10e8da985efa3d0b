use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod bundle;
mod commands;
mod config;

use config::{Overrides, RunConfig};

/// A problem with how the program was invoked; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "ssrec", version, about = "Streaming social-item recommendation: train, index, query, evaluate")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Verbose logging; `index query` also prints the pseudo-queries on stderr.
    #[arg(long, global = true)]
    debug: bool,
    /// TOML run configuration. Flags override it.
    #[arg(long, global = true, env = "SSREC_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda_s: Option<f64>,
    #[arg(long, global = true)]
    mu_producer: Option<f64>,
    #[arg(long, global = true)]
    mu_entity: Option<f64>,
    /// Comma-separated list of k values.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, global = true)]
    partitions: Option<usize>,
    /// Short-term window capacity.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Use this many hidden states for every producer and consumer model.
    #[arg(long, global = true)]
    states_override: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(Args)]
struct Source {
    /// Bundle directory written by `ingest`.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    bundle: Option<PathBuf>,
    /// Raw interaction log.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Log format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Window,
    LambdaS,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a log into a bundle directory (dataset, vocabularies, profiles).
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train producer and consumer models for a bundle.
    Train {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Build entity co-occurrence statistics for a bundle.
    Expand {
        #[arg(long)]
        bundle: PathBuf,
        /// Show the expansion of one item (JSON object or path to one).
        #[arg(long)]
        item: Option<String>,
    },
    /// Build, query, update or check the user index.
    Index {
        #[command(subcommand)]
        action: IndexCommand,
    },
    /// Rolling partitioned stream simulation reporting P@k.
    Simulate {
        #[command(flatten)]
        source: Source,
        /// Score every reachable user instead of searching the index.
        #[arg(long)]
        oracle: bool,
        /// Record query latency (the report then varies between runs).
        #[arg(long)]
        timing: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate over a grid of window sizes or short-term weights.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated grid; defaults to 1..10 for the window and 0.1..1.0 for the weight.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        csv: bool,
    },
    /// Index search against a sequential scan, single-threaded.
    Bench {
        #[command(flatten)]
        source: Source,
    },
    /// Next-category accuracy of the plain and bi-layer consumer models.
    Accuracy {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 1)]
        min_states: usize,
        #[arg(long, default_value_t = 4)]
        max_states: usize,
    },
    /// Write a synthetic interaction log as JSONL.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        /// TOML generator spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        consumers: Option<usize>,
        #[arg(long)]
        ticks: Option<usize>,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build the index from the bundle's profiles and models.
    Build {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Top-k users for one item.
    Query {
        #[arg(long)]
        bundle: PathBuf,
        /// JSON object `{category, producer, entities}` or a path to one.
        #[arg(long)]
        item: String,
    },
    /// Apply a batch of new log rows to the bundle and its index.
    Update {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Load the index with full structural checks.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
    },
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub flags: Overrides,
    pub json: bool,
    pub debug: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let flags = Overrides {
        seed: g.seed,
        lambda_s: g.lambda_s,
        mu_producer: g.mu_producer,
        mu_entity: g.mu_entity,
        k: g.k,
        partitions: g.partitions,
        window: g.window,
        states_override: g.states_override,
    };
    let cfg = RunConfig::load(g.config.as_deref(), &flags)?;
    let ctx = Ctx {
        cfg,
        flags,
        json: g.json,
        debug: g.debug,
    };
    use commands as c;
    match cli.command {
        Command::Ingest { input, format, out } => c::ingest(&ctx, &input, format.map(log_format), &out),
        Command::Train { bundle } => c::train(&ctx, &bundle),
        Command::Expand { bundle, item } => c::expand(&ctx, &bundle, item.as_deref()),
        Command::Index { action } => match action {
            IndexCommand::Build { bundle } => c::index_build(&ctx, &bundle),
            IndexCommand::Query { bundle, item } => c::index_query(&ctx, &bundle, &item),
            IndexCommand::Update { bundle, batch, format } => c::index_update(&ctx, &bundle, &batch, format.map(log_format)),
            IndexCommand::Verify { bundle } => c::index_verify(&ctx, &bundle),
        },
        Command::Simulate {
            source,
            oracle,
            timing,
            out,
        } => c::simulate(&ctx, &source.into(), oracle, timing, out.as_deref()),
        Command::Sweep {
            source,
            param,
            grid,
            csv,
        } => {
            let param = match param {
                Param::Window => ssrec_core::harness::SweepParameter::WindowSize,
                Param::LambdaS => ssrec_core::harness::SweepParameter::LambdaS,
            };
            c::sweep(&ctx, &source.into(), param, grid, csv)
        }
        Command::Bench { source } => c::bench(&ctx, &source.into()),
        Command::Accuracy {
            source,
            min_states,
            max_states,
        } => c::accuracy(&ctx, &source.into(), min_states, max_states),
        Command::Synth {
            out,
            spec,
            consumers,
            ticks,
        } => c::synth(&ctx, &out, spec.as_deref(), consumers, ticks),
    }
}

fn log_format(f: Format) -> ssrec_core::domain::LogFormat {
    match f {
        Format::Jsonl => ssrec_core::domain::LogFormat::Jsonl,
        Format::Csv => ssrec_core::domain::LogFormat::Csv,
    }
}

impl From<Source> for commands::DataSource {
    fn from(s: Source) -> Self {
        match (s.bundle, s.input) {
            (Some(b), _) => commands::DataSource::Bundle(b),
            (None, Some(i)) => commands::DataSource::Log(i, s.format.map(log_format)),
            (None, None) => unreachable!("clap requires one of --bundle and --input"),
        }
    }
}

/// 1 usage, 2 data, 3 integrity.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<ssrec_core::Error>() {
            return match core {
                ssrec_core::Error::Config(_) => 1,
                ssrec_core::Error::Integrity(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.global.debug { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
