//! Thin command-line layer over the `cien-marl` library: every behavior
//! reachable here is a plain library call, so the binary only parses
//! arguments, loads/overrides the configuration, dispatches, and maps errors
//! to exit codes.
//!
//! Exit codes: 0 success, 2 usage error (from the argument parser), 3
//! configuration error (bad config file, bad `--set`, missing or corrupt
//! checkpoint), 4 runtime failure mid-run, 5 gradient check above threshold.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cien_marl::harness::{
    self, GradcheckReport, HarnessError, RunConfig, RunSummary, GRADCHECK_THRESHOLD,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "cien-marl",
    version,
    about = "Train and evaluate cooperative disk-lifting agents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed from a TOML config.
    Train(RunArgs),
    /// Continue a checkpoint under observation noise (needs `[fine_tune]`
    /// and `[noise]` in the config).
    FineTune(RunArgs),
    /// Deterministically evaluate a checkpoint and print its summary.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write per-step trajectory CSVs for a checkpoint.
    ExportTrace(ExportTraceArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Train only this seed (replaces the config's seed list).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set hyper.batch_size=64` or
    /// `--set env.n_agents=5`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint JSON produced by `train` or `fine-tune`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation episodes.
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Also write trajectory CSVs and the summary JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random network instances to probe.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct ExportTraceArgs {
    /// Checkpoint JSON produced by `train` or `fine-tune`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Episodes to trace.
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    /// Directory for the trajectory CSVs.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Read a config file, apply `--set` overrides, then the `--seed` and
/// `--out` shorthands. Unknown keys anywhere are configuration errors.
pub fn load_config(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: toml::Value = toml::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    for entry in sets {
        apply_override(&mut doc, entry).map_err(HarnessError::Config)?;
    }
    let mut config: RunConfig = doc
        .try_into()
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    if let Some(dir) = out {
        config.out_dir = dir.to_path_buf();
    }
    config.validate()?;
    Ok(config)
}

/// Set one dotted key in a TOML document. The value text is parsed as a
/// TOML literal (so `3`, `0.5`, `true`, `[1, 2]`, `"text"` all keep their
/// types); anything that does not parse is taken as a bare string.
fn apply_override(doc: &mut toml::Value, entry: &str) -> Result<(), String> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| format!("--set needs KEY=VALUE, got {entry:?}"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("--set needs a non-empty key in {entry:?}"));
    }
    let value = parse_toml_literal(raw.trim());

    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(format!("key {key:?} has an empty segment"));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("key {key:?} descends into a non-table value"))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split('.') yields at least one segment");
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    raw.parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn error_code(e: &HarnessError) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn print_summaries(summaries: &[RunSummary]) {
    for s in summaries {
        let success = if s.success { "success" } else { "no-success" };
        let reached = match s.episodes_to_success {
            Some(ep) => format!(" (reached target at episode {ep})"),
            None => String::new(),
        };
        println!(
            "{} seed {}: {} episodes, {}, final eval height {:.4} m, tilt {:.4} rad{}",
            s.mode.as_str(),
            s.seed,
            s.episodes,
            success,
            s.final_eval_height_mean,
            s.final_eval_tilt_mean,
            reached
        );
    }
}

fn print_gradcheck(report: &GradcheckReport) {
    println!(
        "gradcheck over {} seeds: worst relative error {:.3e} (critic {:.3e}, actor {:.3e}, influence {:.3e}); threshold {:.0e}: {}",
        report.seeds,
        report.worst(),
        report.worst_critic,
        report.worst_actor,
        report.worst_estimator,
        GRADCHECK_THRESHOLD,
        if report.pass() { "PASS" } else { "FAIL" }
    );
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Train(args) => {
            let config = match load_config(&args.config, &args.set, args.seed, args.out.as_deref())
            {
                Ok(c) => c,
                Err(e) => return report(e),
            };
            match harness::train(&config) {
                Ok(summaries) => {
                    print_summaries(&summaries);
                    EXIT_OK
                }
                Err(e) => report(e),
            }
        }
        Command::FineTune(args) => {
            let config = match load_config(&args.config, &args.set, args.seed, args.out.as_deref())
            {
                Ok(c) => c,
                Err(e) => return report(e),
            };
            match harness::fine_tune(&config) {
                Ok(summaries) => {
                    print_summaries(&summaries);
                    EXIT_OK
                }
                Err(e) => report(e),
            }
        }
        Command::Evaluate(args) => {
            match harness::evaluate_checkpoint(
                &args.checkpoint,
                args.episodes,
                args.out.as_deref(),
                args.out.is_some(),
                args.out.is_some(),
            ) {
                Ok(outcome) => {
                    match serde_json::to_string_pretty(&outcome) {
                        Ok(json) => println!("{json}"),
                        Err(e) => {
                            eprintln!("error: cannot encode summary: {e}");
                            return EXIT_RUNTIME;
                        }
                    }
                    EXIT_OK
                }
                Err(e) => report(e),
            }
        }
        Command::Gradcheck(args) => match harness::gradcheck(args.seeds) {
            Ok(r) => {
                print_gradcheck(&r);
                if r.pass() {
                    EXIT_OK
                } else {
                    EXIT_GRADCHECK
                }
            }
            Err(e) => report(e),
        },
        Command::ExportTrace(args) => {
            match harness::evaluate_checkpoint(
                &args.checkpoint,
                args.episodes,
                Some(&args.out),
                true,
                false,
            ) {
                Ok(outcome) => {
                    println!(
                        "wrote {} trajectory file(s) for {} seed {} into {}",
                        args.episodes,
                        outcome.mode.as_str(),
                        outcome.seed,
                        args.out.display()
                    );
                    EXIT_OK
                }
                Err(e) => report(e),
            }
        }
    }
}

fn report(e: HarnessError) -> i32 {
    eprintln!("error: {e}");
    error_code(&e)
}
