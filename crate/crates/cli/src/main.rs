//! `regraft` — run, replay, and report self-healing orchestration runs,
//! and train the planner policy on critic-scored preference pairs.

mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use regraft::config::EngineConfig;
use regraft::dpo::{self, DpoConfig, PreferenceDataset, TrainReport};
use regraft::expert::load_scripted_scenario;
use regraft::metrics::aggregate;
use regraft::output::{execute_run, replay, GraphDoc, OutputError, PlannerSpec, RunDocument};

/// Exit code for configuration and input-format problems.
const EX_CONFIG: u8 = 64;

#[derive(Parser)]
#[command(name = "regraft", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one query end to end and write the run artifacts.
    Run {
        /// Plan document (query, vertices, sink).
        #[arg(long)]
        graph: PathBuf,
        /// Scripted-expert fixture table; required in scripted mode.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Engine config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for run.json and memory_trace.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a recorded run and verify it is bit-identical.
    Replay {
        /// Run document produced by `run`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Render a comparison table over recorded runs.
    Report {
        /// Run document(s); repeat the flag for multiple runs.
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        /// Answer key (JSON map query -> expected answer) for the
        /// accuracy-proxy column.
        #[arg(long)]
        answer_key: Option<PathBuf>,
    },
    /// Emit memory-trace and token-breakdown artifacts (CSV + SVG) for
    /// every run document in a directory.
    Plot {
        /// Directory scanned (non-recursively) for *.json run documents.
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the planner policy on a preference dataset.
    TrainPlanner {
        /// Preference dataset (JSON).
        #[arg(long)]
        pairs: PathBuf,
        /// Training config (TOML: beta, epsilon, learning_rate, steps,
        /// candidates_per_query, seed, allow_vetoed_rejected).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for training_report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            graph,
            scenario,
            config,
            out,
        } => cmd_run(&graph, scenario.as_deref(), &config, &out),
        Command::Replay { run } => cmd_replay(&run),
        Command::Report {
            run,
            format,
            answer_key,
        } => cmd_report(&run, format, answer_key.as_deref()),
        Command::Plot { runs, out } => cmd_plot(&runs, out.as_deref()),
        Command::TrainPlanner { pairs, config, out } => cmd_train(&pairs, &config, &out),
        Command::Gradcheck { seed, cases } => cmd_gradcheck(seed, cases),
    }
}

/// Input problems (unreadable or malformed config/plan/scenario) exit 64.
fn config_failure(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("configuration error: {e}");
    ExitCode::from(EX_CONFIG)
}

fn cmd_run(
    graph_path: &Path,
    scenario_path: Option<&Path>,
    config_path: &Path,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let config = match EngineConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return Ok(config_failure(e)),
    };
    let graph = match GraphDoc::load(graph_path) {
        Ok(g) => g,
        Err(e) => return Ok(config_failure(e)),
    };
    // CLI flag overrides the config's scenario binding
    let scenario_path = scenario_path
        .map(PathBuf::from)
        .or_else(|| config.scenario.path.clone());
    let scenario = match scenario_path {
        Some(path) => match load_scripted_scenario(&path) {
            Ok(s) => Some(s),
            Err(e) => return Ok(config_failure(e)),
        },
        None => None,
    };

    let doc = match execute_run(
        &graph.query.clone(),
        PlannerSpec::Scripted,
        graph,
        scenario,
        config,
    ) {
        Ok(doc) => doc,
        Err(OutputError::Engine(regraft::orchestrator::EngineError::Config(e))) => {
            return Ok(config_failure(e))
        }
        Err(OutputError::Engine(regraft::orchestrator::EngineError::Plan(e))) => {
            return Ok(config_failure(e))
        }
        Err(e) => return Err(e.into()),
    };

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let run_path = out.join("run.json");
    doc.save(&run_path)?;
    std::fs::write(
        out.join("memory_trace.csv"),
        plot::memory_trace_csv(&doc)?,
    )?;

    let status = doc.result.status;
    println!(
        "status: {status:?}  answer: {}",
        doc.result.answer.as_deref().unwrap_or("<none>")
    );
    println!(
        "tokens: {}  tflops: {:.3}  latency: {:.3}s  peak memory: {} bytes  suspensions: {}",
        doc.result.metrics.tokens_total,
        doc.result.metrics.tflops,
        doc.result.metrics.latency_seconds,
        doc.result.metrics.peak_memory_bytes,
        doc.result.metrics.suspensions,
    );
    println!("run document: {}", run_path.display());
    Ok(ExitCode::from(status.exit_code() as u8))
}

fn cmd_replay(run_path: &Path) -> anyhow::Result<ExitCode> {
    let doc = match RunDocument::load(run_path) {
        Ok(d) => d,
        Err(e) => return Ok(config_failure(e)),
    };
    match replay(&doc) {
        Ok(_) => {
            println!("replay ok: {} is bit-identical", run_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(OutputError::ReplayMismatch { location, detail }) => {
            eprintln!("replay mismatch at {location}: {detail}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_report(
    run_paths: &[PathBuf],
    format: ReportFormat,
    answer_key: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let mut docs = Vec::new();
    for path in run_paths {
        let doc = match RunDocument::load(path) {
            Ok(d) => d,
            Err(e) => return Ok(config_failure(e)),
        };
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        docs.push((label, doc));
    }
    let key: Option<BTreeMap<String, String>> = match answer_key {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read answer key {}", path.display()))?;
            Some(serde_json::from_str(&text).context("answer key parse error")?)
        }
        None => None,
    };
    let labeled: Vec<(String, &RunDocument)> =
        docs.iter().map(|(l, d)| (l.clone(), d)).collect();
    let table = aggregate(&labeled, key.as_ref());
    match format {
        ReportFormat::Table => print!("{}", table.render_text()),
        ReportFormat::Csv => print!("{}", table.render_csv()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(runs_dir: &Path, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let out = out.unwrap_or(runs_dir);
    std::fs::create_dir_all(out)?;
    let mut plotted = 0usize;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(runs_dir)
        .with_context(|| format!("cannot read {}", runs_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for path in entries {
        let Ok(doc) = RunDocument::load(&path) else {
            continue; // not a run document
        };
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        std::fs::write(
            out.join(format!("{stem}_memory_trace.csv")),
            plot::memory_trace_csv(&doc)?,
        )?;
        std::fs::write(
            out.join(format!("{stem}_memory_trace.svg")),
            plot::memory_trace_svg(&doc)?,
        )?;
        std::fs::write(
            out.join(format!("{stem}_token_breakdown.csv")),
            plot::token_breakdown_csv(&doc),
        )?;
        std::fs::write(
            out.join(format!("{stem}_token_breakdown.svg")),
            plot::token_breakdown_svg(&doc),
        )?;
        plotted += 1;
    }
    if plotted == 0 {
        eprintln!("no run documents found in {}", runs_dir.display());
        return Ok(ExitCode::from(EX_CONFIG));
    }
    println!("plotted {plotted} run(s) into {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(pairs: &Path, config_path: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let config: DpoConfig = {
        let text = match std::fs::read_to_string(config_path) {
            Ok(t) => t,
            Err(e) => return Ok(config_failure(e)),
        };
        match toml::from_str(&text) {
            Ok(c) => c,
            Err(e) => return Ok(config_failure(e)),
        }
    };
    let dataset = match PreferenceDataset::load(pairs) {
        Ok(d) => d,
        Err(e) => return Ok(config_failure(e)),
    };
    let training_pairs = dataset.training_pairs();
    let outcome = match dpo::train(&config, &training_pairs) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("training failed: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    std::fs::create_dir_all(out)?;
    let report = TrainReport::new(config, &outcome);
    let report_path = out.join("training_report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("serializable report"),
    )?;
    println!(
        "trained on {} pairs: loss {:.6} -> {:.6}",
        training_pairs.len(),
        report.initial_loss,
        report.final_loss
    );
    println!("report: {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, cases: u32) -> anyhow::Result<ExitCode> {
    let report = dpo::gradcheck(seed, cases);
    println!(
        "gradcheck: {} cases, max relative error {:.3e} (tolerance {:.0e})",
        report.cases, report.max_relative_error, report.tolerance
    );
    if report.passed {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL");
        Ok(ExitCode::from(1))
    }
}
