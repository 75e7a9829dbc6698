mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use wfperf::workflow::Split;

use crate::commands::Ctx;
use crate::config::{Precision, ProviderKind, RunConfig};

pub const ENDPOINT_ENV: &str = "WFPERF_ENDPOINT";

#[derive(Parser, Debug)]
#[command(name = "wfperf", version, about = "Workflow performance surrogate: data, training, evaluation and search")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out/<subcommand>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset JSON; a synthetic corpus is generated when absent.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Embedding / LLM service base URL.
    #[arg(long, global = true, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Repeat for more detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct SplitOpt {
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic corpus.
    GenSynth {
        #[arg(long)]
        workflows: Option<usize>,
    },
    /// Generate graph-reasoning QA items from the dataset workflows.
    GenQa {
        #[arg(long)]
        samples_per_type: Option<usize>,
        /// Workflows withheld into a separate QA file.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Grade answers (from a file or the service) against QA gold answers.
    GradeQa {
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Self-supervised pretraining of the structural encoder.
    PretrainGnn {
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Train the predictor (optionally from a pretrained checkpoint).
    Train {
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Accuracy and ranking utility on one split.
    Eval {
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Per-sample success probabilities.
    Predict {
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Workflows ordered by predicted success rate.
    Rank {
        #[command(flatten)]
        split: SplitOpt,
    },
    /// Compare random, surrogate and oracle guided search.
    SearchSim {
        /// Budgets to compare (comma separated).
        #[arg(long, value_delimiter = ',')]
        budget: Vec<u64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train across a grid of lambda and alpha values.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::GenQa { .. } => "gen-qa",
            Command::GradeQa { .. } => "grade-qa",
            Command::PretrainGnn { .. } => "pretrain-gnn",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Rank { .. } => "rank",
            Command::SearchSim { .. } => "search-sim",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn apply_train(cfg: &mut RunConfig, t: &TrainOverrides) {
    if let Some(v) = t.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = t.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = t.epochs {
        cfg.train.max_epochs = v;
        cfg.train.patience = cfg.train.patience.min(v);
    }
}

/// Flags override the config file, which overrides defaults.
fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(c) = &g.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(e) = &g.endpoint {
        cfg.providers.endpoint = Some(e.clone());
    }
    if let Some(p) = g.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    match &cli.command {
        Command::GenSynth { workflows } => {
            if let Some(n) = workflows {
                cfg.synthetic.workflows = *n;
            }
        }
        Command::GenQa { samples_per_type, holdout } => {
            if let Some(k) = samples_per_type {
                cfg.qa.samples_per_type = *k;
            }
            if let Some(h) = holdout {
                cfg.qa.holdout = *h;
            }
        }
        Command::PretrainGnn { train } | Command::Train { train } => apply_train(&mut cfg, train),
        Command::SearchSim { budget, runs } => {
            if !budget.is_empty() {
                cfg.search.budgets = budget.clone();
            }
            if let Some(r) = runs {
                cfg.search.runs = *r;
            }
        }
        Command::Sweep { lambda, alpha } => {
            if !lambda.is_empty() {
                cfg.sweep.lambda = lambda.clone();
            }
            if !alpha.is_empty() {
                cfg.sweep.alpha = alpha.clone();
            }
        }
        _ => {}
    }
    let cfg = cfg.resolve()?;
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out) = resolve(&cli)?;
    let endpoint = cfg.providers.endpoint.clone();
    if cfg.providers.kind == ProviderKind::Local && endpoint.is_some() {
        log::debug!("endpoint set but providers.kind is local; it is only used by grade-qa");
    }
    let ctx = Ctx::prepare(cfg, out)?;
    match &cli.command {
        Command::GenSynth { .. } => commands::gen_synth(&ctx),
        Command::GenQa { .. } => commands::gen_qa(&ctx),
        Command::GradeQa { qa, answers } => {
            commands::grade_qa(&ctx, qa.as_deref(), answers.as_deref(), endpoint.as_deref())
        }
        Command::PretrainGnn { .. } => commands::pretrain_gnn_cmd(&ctx),
        Command::Train { .. } => commands::train_cmd(&ctx),
        Command::Eval { split } => commands::eval_cmd(&ctx, split.split.into()),
        Command::Predict { split } => commands::predict_cmd(&ctx, split.split.into()),
        Command::Rank { split } => commands::rank_cmd(&ctx, split.split.into()),
        Command::SearchSim { .. } => commands::search_cmd(&ctx),
        Command::Sweep { .. } => commands::sweep_cmd(&ctx),
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<wfperf::error::Error>())
        .map_or("runtime", |e| e.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for part in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&part) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&part);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}
