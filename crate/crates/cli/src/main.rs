use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use randset::harness::{
    emit_plot_data, load_config, read_records, run_trials, summarize, trajectory, write_records, Experiment,
    ExperimentConfig, Pipeline, PlotKind, Stats, SummaryReport, TrialRecord, CONFIG_KEYS, THREADS_ENV,
};
use randset::oracle::run_oracle_suite;
use randset::bounds::Side;
use randset::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "randset", version, about = "Generalization bounds for random hypothesis sets: experiments and exact checks")]
struct Cli {
    /// More diagnostics on stderr (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run SGLD trials (hypothesis set W_1..W_T) and report bound coverage
    SgldBound(RunArgs),
    /// Run full-batch Langevin trials (hypothesis set W_0..W_T) and report bound coverage
    CldBound(RunArgs),
    /// Run trials and fit the box-counting dimension of each trajectory
    FractalDim(RunArgs),
    /// Run the exact enumeration batteries
    OracleSuite {
        #[arg(long)]
        seed: u64,
    },
    /// Summarize a JSON-lines results file
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key, e.g. --set dynamics.beta=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// JSON-lines records path (overrides the config's output key)
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Write the summary as JSON
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
    /// Dump the trajectory of trial 0, replicate 0
    #[arg(long, value_name = "PATH")]
    dump_traj: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON-lines records written by a run
    #[arg(value_name = "RESULTS")]
    input: PathBuf,
    /// Nominal failure probability for the reported binomial floor
    #[arg(long, default_value_t = 0.05)]
    zeta: f64,
    /// Write the summary as JSON
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Directory for bound-vs-gap.csv, dim-fit.csv and term-breakdown.csv
    #[arg(long, value_name = "DIR")]
    plots: Option<PathBuf>,
}

fn config_help() -> String {
    let w = CONFIG_KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let t = CONFIG_KEYS.iter().map(|k| k.1.len()).max().unwrap_or(0);
    let d = CONFIG_KEYS.iter().map(|k| k.2.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (KEY  TYPE  DEFAULT  DESCRIPTION):\n");
    for (key, ty, default, desc) in CONFIG_KEYS {
        let _ = writeln!(s, "  {key:w$}  {ty:t$}  {default:d$}  {desc}");
    }
    let _ = write!(
        s,
        "\n{THREADS_ENV} overrides the worker count.\nExit codes: 0 success, 1 failure, 2 config or usage error, 3 divergence-dominated run or no records."
    );
    s
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::EmptyInput(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn fmt_stats(name: &str, s: &Stats) -> String {
    format!(
        "{name:<14} mean {:.6}  median {:.6}  se {:.6}  (n={})",
        s.mean, s.median, s.std_error, s.count
    )
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Upper => "upper",
        Side::Lower => "lower",
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn render_summary(s: &SummaryReport) -> String {
    let mut o = String::new();
    let _ = writeln!(
        o,
        "records {}  flagged {}  config {}",
        s.records_total,
        s.flagged,
        &s.config_digest[..s.config_digest.len().min(12)]
    );
    let _ = writeln!(o, "{}", fmt_stats("gap", &s.gap));
    let _ = writeln!(o, "{}", fmt_stats("abs_gap", &s.abs_gap));
    let _ = writeln!(o, "{}", fmt_stats("kl", &s.kl_sgld));
    if let Some(r) = &s.rademacher {
        let _ = writeln!(o, "{}", fmt_stats("rademacher", r));
    }
    if let Some(d) = &s.dimension {
        let _ = writeln!(o, "{}", fmt_stats("dimension", d));
    }
    for b in &s.bounds {
        let formula = serde_json::to_value(b.formula).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            o,
            "bound {} {formula} [{}, zeta {}]: coverage {:.4} ({}/{}), floor {:.4} {}",
            b.index,
            side_name(b.side),
            b.zeta,
            b.coverage,
            b.covered,
            b.covered + b.uncovered,
            b.binomial_floor,
            if b.meets_floor { "ok" } else { "BELOW FLOOR" }
        );
        let _ = writeln!(o, "  {}", fmt_stats("value", &b.value));
        for (t, st) in &b.terms {
            let _ = writeln!(o, "  {}", fmt_stats(t.name(), st));
        }
    }
    if let Some(f) = s.sandwich {
        let _ = writeln!(o, "sandwich {f:.4}");
    }
    o
}

fn write_json(value: &SummaryReport, path: &Path) -> randset::Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn load(args: &RunArgs, pipeline: Option<Pipeline>) -> randset::Result<ExperimentConfig> {
    let mut overrides = Vec::with_capacity(args.overrides.len() + 1);
    if let Some(p) = pipeline {
        let name = match p {
            Pipeline::Sgld => "sgld",
            Pipeline::Cld => "cld",
        };
        overrides.push(format!("pipeline={name}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    let cfg = load_config(&args.config, &overrides)?;
    if pipeline.is_some_and(|p| p != cfg.pipeline) {
        return Err(Error::Usage("the subcommand fixes the pipeline; drop the pipeline override".into()));
    }
    Ok(cfg)
}

fn run(args: &RunArgs, pipeline: Option<Pipeline>, need_fractal: bool) -> randset::Result<u8> {
    let cfg = load(args, pipeline)?;
    if need_fractal && cfg.fractal.is_none() {
        return Err(Error::Config("fractal-dim needs a fractal section".into()));
    }
    log::info!("config {} with {} trials of {} replicates", cfg.digest(), cfg.trials, cfg.replicates);
    if let Some(path) = &args.dump_traj {
        let exp = Experiment::new(cfg.clone())?;
        match trajectory(&exp, 0, 0) {
            Ok(t) => randset::dynamics::write_trajectory(&t, BufWriter::new(File::create(path)?))?,
            Err(Error::Divergence { last_finite_step }) => {
                log::warn!("trial 0 replicate 0 diverged after step {last_finite_step}; no dump written")
            }
            Err(e) => return Err(e),
        }
    }
    let records = run_trials(&cfg)?;
    if let Some(path) = args.output.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)) {
        write_records(&records, &path)?;
        log::info!("wrote {} records to {}", records.len(), path.display());
    }
    if records.is_empty() {
        eprintln!("no records (trials = 0)");
        return Ok(EXIT_DIVERGED);
    }
    if need_fractal {
        let mut o = String::new();
        for r in &records {
            if let Some(d) = &r.dimension {
                let _ = writeln!(o, "trial {} dimension {:.6} residual {:.3e}", r.trial, d.dimension, d.residual);
            }
        }
        emit(&o);
    }
    let zeta = cfg.bounds.first().map_or(0.05, |b| b.zeta);
    finish(&records, zeta, args.summary.as_deref())
}

fn finish(records: &[TrialRecord], zeta: f64, summary: Option<&Path>) -> randset::Result<u8> {
    let flagged = records.iter().filter(|r| r.flagged).count();
    let s = match summarize(records, zeta) {
        Ok(s) => s,
        Err(Error::EmptyInput(_)) => {
            eprintln!("all {} trials flagged for divergence", records.len());
            return Ok(EXIT_DIVERGED);
        }
        Err(e) => return Err(e),
    };
    emit(&render_summary(&s));
    if let Some(path) = summary {
        write_json(&s, path)?;
    }
    if 2 * flagged > records.len() {
        eprintln!("{flagged} of {} trials flagged for divergence", records.len());
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

fn report(args: &ReportArgs) -> randset::Result<u8> {
    if !(args.zeta > 0.0 && args.zeta < 1.0) {
        return Err(Error::Usage(format!("--zeta must lie in (0,1), got {}", args.zeta)));
    }
    let records = read_records(&args.input).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read results {}: {io}", args.input.display())),
        e => e,
    })?;
    if records.is_empty() {
        eprintln!("no records in {}", args.input.display());
        return Ok(EXIT_DIVERGED);
    }
    if let Some(dir) = &args.plots {
        std::fs::create_dir_all(dir)?;
        for kind in PlotKind::ALL {
            emit_plot_data(&records, kind, &dir.join(format!("{}.csv", kind.name())))?;
        }
    }
    finish(&records, args.zeta, args.output.as_deref())
}

fn oracle_suite(seed: u64) -> randset::Result<u8> {
    let results = run_oracle_suite(seed)?;
    let mut ok = true;
    let mut o = String::new();
    for r in &results {
        ok &= r.passed();
        let _ = writeln!(
            o,
            "{:<28} {}  cases {}  failures {}  worst margin {:.3e}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.cases,
            r.failures,
            r.worst_margin
        );
    }
    emit(&o);
    Ok(if ok { 0 } else { EXIT_FAILURE })
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(config_help());
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", config_help());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let outcome = match &cli.command {
        Command::SgldBound(a) => run(a, Some(Pipeline::Sgld), false),
        Command::CldBound(a) => run(a, Some(Pipeline::Cld), false),
        Command::FractalDim(a) => run(a, None, true),
        Command::OracleSuite { seed } => oracle_suite(*seed),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
