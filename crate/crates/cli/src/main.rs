use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cicl_core::corpus::{convert_conll_bio, corpus_stats, load_jsonl, Split, TypeSchema};
use cicl_core::gateway::{CaptureLog, CapturingGateway, LlmGateway};
use cicl_core::mining::{read_negative_bank, write_negative_bank};
use cicl_core::orchestrator::{
    build_embedding_provider, build_gateway, compare_strategies, evaluate_predictions, full_strategy_grid,
    sweep_proportions, sweep_shots, BackendConfig, Experiment, ExperimentConfig, NegativeStrategy,
    PositiveStrategy, RunError, RunReport, SweepTable,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cicl", version, about = "Contrastive in-context learning for few-shot NER and RE")]
struct Cli {
    /// Log filter, e.g. `info` or `cicl_core=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CoNLL-style BIO file to the JSONL corpus format.
    Convert {
        #[arg(long)]
        bio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the inferred type schema.
        #[arg(long)]
        schema_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Print sentence, mention and type counts of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Embed the train and test corpora into the cache.
    Embed {
        #[command(flatten)]
        exp: ExpArgs,
        /// Also dump the training index as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine hard negatives from a training pool.
    MineNegatives {
        #[command(flatten)]
        exp: ExpArgs,
        /// Training pool; defaults to the config's train file.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Queries per sentence for self-consistency voting.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the prompts for every test sentence without querying for answers.
    BuildPrompts {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        /// Existing negative bank; mined through the backend when omitted.
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment over every configured seed.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Vary the demonstration total.
    SweepShots {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Vary the number of negatives at a fixed total.
    SweepProportions {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        negatives: Vec<usize>,
    },
    /// Compare positive and negative selection strategies.
    CompareStrategies {
        #[command(flatten)]
        exp: ExpArgs,
        /// Cells as `positive:negative`, e.g. `knn:f1_and_sc,random:random`.
        /// Defaults to the full grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Score stored predictions against a gold corpus.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Print a run report or sweep table.
    Report {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Record every backend call to this JSONL log.
    #[arg(long, conflicts_with = "replay")]
    capture: Option<PathBuf>,
    /// Answer from a capture log instead of the configured backend.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    test_limit: Option<usize>,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::from_toml_file(&self.config)?;
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if self.test_limit.is_some() {
            config.test_limit = self.test_limit;
        }
        if let Some(path) = &self.replay {
            config.backend = BackendConfig::Replay { path: path.clone() };
            config.capture_log = Some(path.clone());
        }
        if let Some(path) = &self.capture {
            config.capture_log = Some(path.clone());
        }
        Ok(config)
    }

    fn gateway(&self, config: &ExperimentConfig) -> Result<Box<dyn LlmGateway>> {
        let inner = build_gateway(&config.backend)?;
        Ok(match &self.capture {
            Some(path) => Box::new(CapturingGateway::new(inner, CaptureLog::open(path)?)),
            None => inner,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match &cli.log {
        Some(f) => tracing_subscriber::EnvFilter::new(f),
        None => tracing_subscriber::EnvFilter::try_from_default_env()
            .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
    };
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<RunError>().map(RunError::exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Convert {
            bio,
            out,
            schema_out,
            split,
        } => {
            let conv = convert_conll_bio(&bio, split.into())?;
            for w in &conv.warnings {
                tracing::warn!("{w}");
            }
            conv.corpus.write_jsonl(&out)?;
            if let Some(path) = schema_out {
                conv.corpus.schema.write_json_file(&path)?;
            }
            println!(
                "{} sentences, {} tokens, {} mentions",
                conv.corpus.len(),
                conv.tokens,
                conv.decoded_mentions
            );
            Ok(0)
        }
        Command::Stats { corpus, schema } => {
            let schema = TypeSchema::from_json_file(&schema)?;
            let corpus = load_jsonl(&corpus, &schema, Split::Train)?;
            println!("{}", serde_json::to_string_pretty(&corpus_stats(&corpus))?);
            Ok(0)
        }
        Command::Embed { exp, out } => {
            let config = exp.config()?;
            let experiment = Experiment::load(config)?;
            let embedder = build_embedding_provider(&experiment.config.embedding)?;
            let (train, test) = experiment.build_indices(embedder.as_ref())?;
            if let Some(path) = out {
                train.write_jsonl(&path)?;
            }
            println!("embedded {} train and {} test sentences (dim {})", train.len(), test.len(), train.dim());
            Ok(0)
        }
        Command::MineNegatives {
            exp,
            pool,
            n,
            tau,
            limit,
            seed,
            out,
        } => {
            let mut config = exp.config()?;
            if let Some(pool) = pool {
                config.train = pool;
            }
            if let Some(n) = n {
                config.vote_n = n;
            }
            if let Some(tau) = tau {
                config.tau = tau;
            }
            if let Some(limit) = limit {
                config.negative_limit = limit;
            }
            let gateway = exp.gateway(&config)?;
            let experiment = Experiment::load(config)?;
            let embedder = build_embedding_provider(&experiment.config.embedding)?;
            let (train, _) = experiment.build_indices(embedder.as_ref())?;
            let outcome = experiment.mine_negatives(&train, gateway.as_ref(), seed)?;
            if let Some(w) = &outcome.warning {
                tracing::warn!("{w}");
            }
            write_negative_bank(&out, &outcome.negatives)?;
            println!(
                "{} negatives from {} queried sentences",
                outcome.negatives.len(),
                outcome.generations.len()
            );
            Ok(0)
        }
        Command::BuildPrompts {
            exp,
            seed,
            negatives,
            out,
        } => {
            let config = exp.config()?;
            let experiment = Experiment::load(config.clone())?;
            let embedder = build_embedding_provider(&experiment.config.embedding)?;
            let (train, test) = experiment.build_indices(embedder.as_ref())?;
            let bank = match negatives {
                Some(path) => read_negative_bank(&path, &experiment.train)?,
                None if config.n_negatives > 0 => {
                    let gateway = exp.gateway(&config)?;
                    experiment.negative_bank(&train, gateway.as_ref(), seed)?.0
                }
                None => Vec::new(),
            };
            let mut lines = String::new();
            for s in &experiment.test.sentences {
                let prompt = experiment.build_prompt((&train, &test), &bank, seed, s)?;
                let line = json!({"id": s.id, "prompt": prompt.text(), "n_pos": prompt.n_pos, "n_neg": prompt.n_neg});
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
            println!("{} prompts written to {}", experiment.test.len(), out.display());
            Ok(0)
        }
        Command::Run { exp } => {
            let config = exp.config()?;
            let gateway = exp.gateway(&config)?;
            let experiment = Experiment::load(config)?;
            let embedder = build_embedding_provider(&experiment.config.embedding)?;
            let report = experiment.run(gateway.as_ref(), embedder.as_ref())?;
            print!("{}", report.to_table());
            Ok(report.exit_code() as u8)
        }
        Command::SweepShots { exp, values } => {
            run_sweep(&exp, |e, g, p| sweep_shots(e, &values, g, p))
        }
        Command::SweepProportions { exp, negatives } => {
            run_sweep(&exp, |e, g, p| sweep_proportions(e, &negatives, g, p))
        }
        Command::CompareStrategies { exp, grid } => {
            let grid = if grid.is_empty() {
                full_strategy_grid()
            } else {
                grid.iter().map(|cell| parse_cell(cell)).collect::<Result<Vec<_>>>()?
            };
            run_sweep(&exp, |e, g, p| compare_strategies(e, &grid, g, p))
        }
        Command::Eval { gold, schema, pred } => {
            let schema = TypeSchema::from_json_file(&schema)?;
            let gold = load_jsonl(&gold, &schema, Split::Test)?;
            let (metrics, errors, _) = evaluate_predictions(&gold, &pred)?;
            println!("{}", serde_json::to_string_pretty(&json!({"metrics": metrics, "errors": errors}))?);
            Ok(0)
        }
        Command::Report { path, json } => print_report(&path, json),
    }
}

fn run_sweep(
    exp: &ExpArgs,
    f: impl FnOnce(
        &Experiment,
        &dyn LlmGateway,
        &dyn cicl_core::retrieval::EmbeddingProvider,
    ) -> Result<SweepTable, RunError>,
) -> Result<u8> {
    let config = exp.config()?;
    let gateway = exp.gateway(&config)?;
    let experiment = Experiment::load(config)?;
    let embedder = build_embedding_provider(&experiment.config.embedding)?;
    let table = f(&experiment, gateway.as_ref(), embedder.as_ref())?;
    print!("{}", table.to_table());
    let partial = table
        .rows
        .iter()
        .any(|r| r.status == cicl_core::orchestrator::RunStatus::Partial);
    Ok(if partial { 3 } else { 0 })
}

fn parse_cell(cell: &str) -> Result<(PositiveStrategy, NegativeStrategy)> {
    let Some((p, n)) = cell.split_once(':') else {
        bail!("grid cell `{cell}` is not `positive:negative`");
    };
    let p = serde_json::from_value(json!(p.trim())).with_context(|| format!("unknown positive strategy `{p}`"))?;
    let n = serde_json::from_value(json!(n.trim())).with_context(|| format!("unknown negative strategy `{n}`"))?;
    Ok((p, n))
}

fn print_report(path: &Path, as_json: bool) -> Result<u8> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(report) = serde_json::from_str::<RunReport>(&text) {
        if as_json {
            print!("{}", report.to_json());
        } else {
            print!("{}", report.to_table());
        }
        return Ok(0);
    }
    let table: SweepTable = serde_json::from_str(&text)
        .with_context(|| format!("{} is neither a run report nor a sweep table", path.display()))?;
    if as_json {
        print!("{}", table.to_json());
    } else {
        print!("{}", table.to_table());
    }
    Ok(0)
}
