//! Command-line front end for the concept evolution engine.
//!
//! Every verb that builds a configuration accepts `--config <file>` followed
//! by any number of `--key=value` overrides (dotted paths into the config
//! JSON, e.g. `--fit.lr=0.05` or `--T=20`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cbm_evolve::adapter::AdapterWeights;
use cbm_evolve::concept::{init_concepts, ConceptOrigin};
use cbm_evolve::evolution::{ordered_pair, HistoryBank};
use cbm_evolve::orchestrator::{
    build_inputs, build_llm, eval_accuracy, iter_dir, load_dataset, load_latest_history, load_latest_library,
    load_records, load_world, read_labels, report_rows, scores_path, RunConfig, RunError, Runner, WorldSetting,
};
use cbm_evolve::scoring::{score, CacheFileBackend, ScoreCache, ScorerBackend};
use cbm_evolve::ConceptLibrary;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Flags owned by the CLI itself; any other `--key=value` is a config override.
const OWN_FLAGS: &[&str] = &["config", "run-dir", "out", "library", "weights", "scores", "zero-shot"];

#[derive(Parser)]
#[command(name = "cbm-evolve", version, about = "Evolve concept libraries for concept-bottleneck classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an initial concept library from the label set.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start a run in a fresh directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Continue a checkpointed run. Overrides apply to the stored config.
    Resume {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Accuracy of a library and its weights, or of a finished run.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Take config, library, weights and scores from a run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Precomputed score cache; the configured scorer is used otherwise.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Ignore stored weights and evaluate zero-shot.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Print the evolution history of one class pair.
    InspectPair {
        #[arg(long)]
        run_dir: PathBuf,
        i: usize,
        j: usize,
    },
    /// Write per-iteration CSV, added concepts and confusion matrices.
    ExportReport {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory, `<run_dir>/report` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic world fixture (world.params.* overrides apply).
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Separates config overrides from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut cli = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg
            .strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(key, _)| !OWN_FLAGS.contains(&key));
        if is_override {
            overrides.push(arg);
        } else {
            cli.push(arg);
        }
    }
    (cli, overrides)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

/// Writes one line to stdout; a closed pipe surfaces as an error instead of
/// a panic.
macro_rules! emit {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

fn print_json(value: serde_json::Value) -> Result<()> {
    emit!("{value}");
    Ok(())
}

fn cmd_init(config: &RunConfig, out: &Path) -> Result<()> {
    let labels = match &config.data.labels {
        Some(path) => read_labels(path)?,
        None => load_dataset(config)?.0,
    };
    let llm = build_llm(config)?;
    let library = init_concepts(&labels, llm.as_ref(), &config.init_template, &config.init_options())?;
    fs::write(out, library.to_json())?;
    print_json(json!({"classes": library.n_classes(), "concepts": library.len(), "library": out}))
}

fn finish_run(mut runner: Runner) -> Result<()> {
    runner.run_to_end()?;
    let out = runner.finish()?;
    print_json(json!({
        "iterations": out.records.len(),
        "final_library_size": out.library.len(),
        "final_accuracy": out.final_accuracy,
        "stop_reason": out.records.last().and_then(|r| r.stop_reason.clone()),
    }))
}

fn cmd_run(config: RunConfig, run_dir: &Path) -> Result<()> {
    let inputs = build_inputs(&config)?;
    finish_run(Runner::create(config, inputs, Some(run_dir))?)
}

fn cmd_resume(run_dir: &Path, overrides: &[String]) -> Result<()> {
    let config = load_config(Some(&run_dir.join("config.json")), overrides)?;
    let inputs = build_inputs(&config)?;
    finish_run(Runner::resume(run_dir, inputs, Some(config))?)
}

struct EvalSources {
    config: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    library: Option<PathBuf>,
    weights: Option<PathBuf>,
    scores: Option<PathBuf>,
    zero_shot: bool,
}

fn cmd_eval(src: EvalSources, overrides: &[String]) -> Result<()> {
    let run_dir = src.run_dir.as_deref();
    let config_path = src.config.or_else(|| run_dir.map(|d| d.join("config.json")));
    let config = load_config(config_path.as_deref(), overrides)?;
    let library = match (&src.library, run_dir) {
        (Some(p), _) => ConceptLibrary::from_json(&fs::read_to_string(p)?)?,
        (None, Some(d)) => load_latest_library(d)?,
        (None, None) => bail!("eval needs --library or --run-dir"),
    };
    let weights_path = src.weights.or_else(|| run_dir.map(|d| d.join("weights_final.bin")).filter(|p| p.exists()));
    let weights = match weights_path {
        Some(p) if !src.zero_shot => Some(AdapterWeights::from_bytes(&fs::read(&p)?)?.0),
        _ => None,
    };
    let (_, manifest) = load_dataset(&config)?;
    let labels = manifest.labels().ok_or_else(|| RunError::Config("eval needs a labeled manifest".into()))?;
    let scores_file = src.scores.or_else(|| run_dir.map(scores_path).filter(|p| p.exists()));
    let (backend, mut cache): (Box<dyn ScorerBackend>, ScoreCache) = match scores_file {
        Some(p) => (Box::new(CacheFileBackend::open(&p)?), ScoreCache::load(&p)?),
        None => {
            let inputs = build_inputs(&config)?;
            let cache = ScoreCache::new(inputs.scorer.backbone_id(), config.dataset_name());
            (inputs.scorer, cache)
        }
    };
    let (scores, _) = score(backend.as_ref(), &manifest, &library, &config.score_template, &mut cache, config.max_inflight)?;
    let acc = eval_accuracy(&library, weights.as_ref(), &scores, &labels)?;
    print_json(json!({
        "accuracy": acc,
        "images": labels.len(),
        "concepts": library.len(),
        "weights": if weights.is_some() { "trained" } else { "zero_shot" },
    }))
}

fn cmd_inspect_pair(run_dir: &Path, i: usize, j: usize) -> Result<()> {
    let library = load_latest_library(run_dir)?;
    let n = library.n_classes();
    if i == j || i >= n || j >= n {
        return Err(RunError::Config(format!("pair ({i}, {j}) is not two distinct classes below {n}")).into());
    }
    let pair = ordered_pair(i, j);
    let labels = library.labels();
    let (a, b) = (labels.name(pair.0), labels.name(pair.1));
    let bank = load_latest_history(run_dir)?.unwrap_or_else(HistoryBank::new);
    let rounds = bank.rounds(pair);
    if rounds.is_empty() {
        emit!("no history for pair ({}, {}) \"{a}\" / \"{b}\": it has not been evolved", pair.0, pair.1);
        return Ok(());
    }
    emit!("pair ({}, {}) \"{a}\" / \"{b}\": {} rounds", pair.0, pair.1, rounds.len());
    for round in rounds {
        let after = round.followup_r.map_or_else(|| "pending".to_string(), |r| format!("{r:.2}"));
        emit!("iteration {}: confusion {:.2} -> {after}", round.iteration, round.confusion_before);
        for (name, concepts) in [(a, &round.proposed_i), (b, &round.proposed_j)] {
            for c in concepts {
                emit!("  + {name}: {}", c.text());
            }
        }
    }
    Ok(())
}

fn cmd_export_report(run_dir: &Path, out: &Path) -> Result<()> {
    let records = load_records(run_dir)?;
    fs::create_dir_all(out.join("confusion"))?;
    let mut csv = csv::Writer::from_path(out.join("iterations.csv"))?;
    for row in report_rows(&records) {
        csv.serialize(row)?;
    }
    csv.flush()?;

    for r in &records {
        let src = iter_dir(run_dir, r.t).join("confusion.json");
        fs::copy(&src, out.join("confusion").join(format!("iter_{:03}.json", r.t)))
            .with_context(|| format!("copying {}", src.display()))?;
    }

    let library = load_latest_library(run_dir)?;
    let mut added = csv::Writer::from_path(out.join("concepts_added.csv"))?;
    added.write_record(["iteration", "class", "concept", "pair_i", "pair_j"])?;
    for (class, c) in library.flatten() {
        if let ConceptOrigin::Evolved { iteration, pair } = c.origin() {
            added.write_record([
                iteration.to_string(),
                library.labels().name(class).to_string(),
                c.text().to_string(),
                pair.0.to_string(),
                pair.1.to_string(),
            ])?;
        }
    }
    added.flush()?;
    print_json(json!({"rows": records.len(), "out": out}))
}

fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<()> {
    let setting = config.world.clone().unwrap_or_else(|| WorldSetting { path: None, params: Default::default() });
    let world = load_world(&setting)?;
    fs::write(out, world.to_json())?;
    print_json(json!({"classes": world.n_classes(), "images": world.images.len(), "world": out}))
}

fn dispatch(command: Command, overrides: &[String]) -> Result<()> {
    let no_overrides = |verb: &str| -> Result<()> {
        if overrides.is_empty() {
            Ok(())
        } else {
            bail!("{verb} takes no config overrides (got {})", overrides.join(" "))
        }
    };
    match command {
        Command::Init { cfg, out } => cmd_init(&load_config(cfg.config.as_deref(), overrides)?, &out),
        Command::Run { cfg, run_dir } => cmd_run(load_config(cfg.config.as_deref(), overrides)?, &run_dir),
        Command::Resume { run_dir } => cmd_resume(&run_dir, overrides),
        Command::Eval { cfg, run_dir, library, weights, scores, zero_shot } => cmd_eval(
            EvalSources { config: cfg.config, run_dir, library, weights, scores, zero_shot },
            overrides,
        ),
        Command::InspectPair { run_dir, i, j } => {
            no_overrides("inspect-pair")?;
            cmd_inspect_pair(&run_dir, i, j)
        }
        Command::ExportReport { run_dir, out } => {
            no_overrides("export-report")?;
            let out = out.unwrap_or_else(|| run_dir.join("report"));
            cmd_export_report(&run_dir, &out)
        }
        Command::Simulate { cfg, out } => cmd_simulate(&load_config(cfg.config.as_deref(), overrides)?, &out),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<RunError>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "error"
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match dispatch(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", json!({"error": error_kind(&err), "message": format!("{err:#}")}));
            ExitCode::FAILURE
        }
    }
}
