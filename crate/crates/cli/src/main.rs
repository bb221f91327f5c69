//! `reicl`: relation extraction experiments with retrieved in-context
//! demonstrations.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 provider error.

mod config;

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reicl_core::corpus::{
    label_histogram, load_dataset, null_fraction, sample_stratified_subset, CorpusError,
    DatasetSplit, RelationSchema, SplitName,
};
use reicl_core::embed::{embed_split, import_ft_vectors, EmbedError, EmbeddingStore, Regime};
use reicl_core::eval::{score, EvalReport, Setting};
use reicl_core::pipeline::{
    cmd_sweep, read_predictions, write_report, EmbeddingConfig, EmbeddingProviderKind,
    PipelineError, RunContext, SweepCell, SweepGrid,
};
use reicl_core::prompt::PromptTemplates;
use reicl_core::retrieve::{KnnIndex, Strategy};

use config::{Globals, LlmFlags, RunFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Provider(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Provider(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_provider_failure() {
            CliError::Provider(e.to_string())
        } else if matches!(e, PipelineError::Config(_) | PipelineError::EmptyGrid) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Provider { .. } => CliError::Provider(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "reicl",
    version,
    about = "Relation extraction with retrieved in-context demonstrations"
)]
struct Cli {
    /// Run configuration (TOML); flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeat for debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a JSONL split, print label statistics, optionally write it
    /// normalized under --out
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value = "train")]
        split: SplitName,
    },
    /// Compute sentence or entity-prompt vectors, or check an imported
    /// fine-tuned vector file
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value = "train")]
        split: SplitName,
        #[arg(long)]
        regime: Regime,
        /// Vector file to create, extend, or (for `ft`) check
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, value_parser = ["hash", "http"], default_value = "hash")]
        provider: String,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Exact cosine neighbours of every query vector among the indexed vectors
    Index {
        #[arg(long)]
        vectors: PathBuf,
        /// Defaults to the indexed vectors themselves
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Never return a query's own id
        #[arg(long)]
        exclude_self: bool,
    },
    /// Generate and cache reasoning for training instances
    Reason {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        llm: LlmFlags,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Predict every test instance and score the run
    Run {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        llm: LlmFlags,
    },
    /// Run a strategy x k grid and write the F1 curve
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        llm: LlmFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Score a predictions file
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value = "with_null")]
        setting: Setting,
        /// Print the JSON report instead of the table
        #[arg(long)]
        json: bool,
    },
    /// Print the report of a run or sweep directory
    Report {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Draw a label-stratified subset of a split
    SampleSubset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn globals(cli: &Cli) -> Globals<'_> {
    Globals {
        config: cli.config.as_deref(),
        cache_dir: cli.cache_dir.as_deref(),
        out: cli.out.as_deref(),
        seed: cli.seed,
    }
}

fn load(
    path: &Path,
    split: SplitName,
    schema: &Path,
) -> Result<(RelationSchema, DatasetSplit), CliError> {
    let schema = RelationSchema::load(schema)?;
    let data = load_dataset(path, split, &schema)?;
    Ok((schema, data))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest {
            data,
            schema,
            split,
        } => {
            let (_, data) = load(data, *split, schema)?;
            println!(
                "{split}: {} instances, NULL fraction {:.4}",
                data.len(),
                null_fraction(&data)
            );
            for (label, count) in label_histogram(&data) {
                println!("  {:<32} {count}", label.verbalize());
            }
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(data_err)?;
                let path = out.join(format!("{split}.jsonl"));
                data.save(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Embed {
            data,
            schema,
            split,
            regime,
            vectors,
            provider,
            dim,
            batch_size,
            templates,
        } => {
            let (_, data) = load(data, *split, schema)?;
            let store = if *regime == Regime::Ft {
                import_ft_vectors(vectors, &data)?
            } else {
                let config = EmbeddingConfig {
                    provider: if provider == "http" {
                        EmbeddingProviderKind::Http
                    } else {
                        EmbeddingProviderKind::Hash
                    },
                    dim: *dim,
                    batch_size: *batch_size,
                    ..EmbeddingConfig::default()
                };
                let templates = match templates {
                    Some(p) => {
                        PromptTemplates::load(p).map_err(|e| CliError::Usage(e.to_string()))?
                    }
                    None => PromptTemplates::default(),
                };
                let provider = config.provider()?;
                if let Some(dir) = vectors.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(data_err)?;
                }
                embed_split(
                    &data,
                    provider.as_ref(),
                    *regime,
                    vectors,
                    &templates,
                    &config.options(),
                )?
            };
            let missing = data
                .instances()
                .iter()
                .filter(|i| !store.contains(&i.id))
                .count();
            println!(
                "{}: {} vectors, dim {}, regime {}, {missing} instances without a vector",
                vectors.display(),
                store.len(),
                store.dim(),
                store.regime()
            );
        }
        Command::Index {
            vectors,
            queries,
            k,
            exclude_self,
        } => {
            let store = EmbeddingStore::load(vectors)?;
            let index = KnnIndex::build(&store).map_err(data_err)?;
            let query_store = match queries {
                Some(q) => EmbeddingStore::load(q)?,
                None => store.clone(),
            };
            let mut out: Box<dyn Write> = match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(data_err)?;
                    Box::new(std::fs::File::create(dir.join("neighbors.jsonl")).map_err(data_err)?)
                }
                None => Box::new(std::io::stdout().lock()),
            };
            for record in query_store.records() {
                let exclude: HashSet<String> = if *exclude_self {
                    [record.instance_id.clone()].into()
                } else {
                    HashSet::new()
                };
                let neighbors = index
                    .query(&record.values, *k, &exclude)
                    .map_err(data_err)?;
                let line = serde_json::json!({"id": record.instance_id, "neighbors": neighbors});
                writeln!(out, "{line}").map_err(data_err)?;
            }
        }
        Command::Reason { run, llm, limit } => {
            let mut run = run.clone();
            run.reasoning = true;
            let mut config = config::build(&globals(cli), &run, llm)?;
            // Reasoning does not depend on retrieval; skip vector loading.
            config.strategy = Strategy::RandomBalanced;
            let ctx = RunContext::prepare(config)?;
            let stats = ctx.warm_reasoning(*limit)?;
            println!(
                "reasoning: {} generated, {} cached, {} empty",
                stats.generated, stats.cache_hits, stats.empty
            );
        }
        Command::Run { run, llm } => {
            let config = config::build(&globals(cli), run, llm)?;
            let out_dir = config.output_dir.clone();
            let outcome = RunContext::prepare(config)?.run()?;
            print!("{}", outcome.report.to_table());
            println!(
                "\n{} predictions ({} resumed), {} provider calls, {} prompts truncated; outputs in {}",
                outcome.records.len(),
                outcome.stats.resumed,
                outcome.stats.provider_calls,
                outcome.stats.truncated_prompts,
                out_dir.display()
            );
        }
        Command::Sweep {
            run,
            llm,
            strategies,
            ks,
        } => {
            let mut run = run.clone();
            // Placeholders so the base config validates; every cell sets both.
            run.strategy = run.strategy.or(Some(strategies[0].as_str().into()));
            run.k = run.k.or(ks.first().map(|&k| k as i64));
            let config = config::build(&globals(cli), &run, llm)?;
            let grid = SweepGrid {
                strategies: strategies.clone(),
                ks: ks.clone(),
            };
            let cells = cmd_sweep(&config, &grid)?;
            print_cells(&cells);
            if cells.iter().all(|c| c.micro_f1.is_none()) {
                return Err(CliError::Data("every sweep cell failed".into()));
            }
        }
        Command::Eval {
            predictions,
            schema,
            setting,
            json,
        } => {
            let schema = RelationSchema::load(schema)?;
            let preds = read_predictions(predictions, &schema)?;
            let report = score(&preds, &schema, *setting).map_err(data_err)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(data_err)?;
                write_report(out, &report)?;
            }
            print_report(&report, *json);
        }
        Command::Report { dir, json } => {
            let sweep = dir.join("sweep.json");
            if sweep.exists() {
                let text = std::fs::read_to_string(&sweep).map_err(data_err)?;
                let cells: Vec<SweepCell> = serde_json::from_str(&text).map_err(data_err)?;
                if *json {
                    println!("{text}");
                } else {
                    print_cells(&cells);
                }
            } else {
                let path = dir.join("report.json");
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                let report: EvalReport = serde_json::from_str(&text).map_err(data_err)?;
                print_report(&report, *json);
            }
        }
        Command::SampleSubset {
            data,
            schema,
            split,
            n,
            output,
        } => {
            let (_, data) = load(data, *split, schema)?;
            let subset = sample_stratified_subset(&data, *n, cli.seed.unwrap_or(0))?;
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(data_err)?;
            }
            subset.save(output)?;
            println!("wrote {} instances to {}", subset.len(), output.display());
            for (label, count) in label_histogram(&subset) {
                println!("  {:<32} {count}", label.verbalize());
            }
        }
    }
    Ok(())
}

fn print_report(report: &EvalReport, json: bool) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
    } else {
        print!("{}", report.to_table());
    }
}

fn print_cells(cells: &[SweepCell]) {
    println!("{:<16} {:>4}  {:>8}", "strategy", "k", "micro_f1");
    for c in cells {
        match (c.micro_f1, &c.error) {
            (Some(f1), _) => println!("{:<16} {:>4}  {:>8.4}", c.strategy.as_str(), c.k, f1),
            (None, err) => println!(
                "{:<16} {:>4}  failed: {}",
                c.strategy.as_str(),
                c.k,
                err.as_deref().unwrap_or("unknown error")
            ),
        }
    }
}
