//! `stabench` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad config,
//! failed integrity check), 3 runtime failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stabench_core::metrics::{AuditReport, Stat};
use stabench_core::runner::export::{analyze, compare, export_csv, ExportKind};
use stabench_core::runner::{self, AuditConfig, RunOptions};
use stabench_core::Error;

#[derive(Parser)]
#[command(name = "stabench", version, about = "Perturbation audits of training stability")]
struct Cli {
    /// More progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Audit config (TOML).
    config: PathBuf,
    /// `dotted.key=value` config override; repeatable.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for run-level parallelism.
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
    /// Parent directory; each invocation writes a fresh timestamped subdirectory.
    #[arg(long, default_value = "audits")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full audit and write its artifacts.
    Run(RunArgs),
    /// Verify stored artifacts by recomputing every derived quantity.
    Replay {
        dir: PathBuf,
    },
    /// Repeat an audit with its perturbation moved across start fractions.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated start fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        fracs: Vec<f64>,
    },
    /// Collapse-versus-stable regrouping of stored run metrics.
    Analyze {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Cross-config table of several `report.json` files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// CSV export of per-step data for plotting.
    Export {
        dir: PathBuf,
        /// trajectories, channels or latents.
        #[arg(long)]
        what: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

struct Log {
    level: i32,
}

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let log = Log {
        level: if cli.quiet { 0 } else { 1 + cli.verbose as i32 },
    };
    match execute(cli.command, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command, log: &Log) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let (cfg, opts) = load(&args)?;
            log.info(format!(
                "audit {} ({} seeds x {} runs, config {})",
                cfg.name,
                cfg.seeds.len(),
                1 + cfg.perturbations.len(),
                &cfg.hash()[..12]
            ));
            let outcome = runner::run_audit(&cfg, &opts)?;
            let dir = fresh_dir(&args.out, &cfg.name)?;
            runner::write_artifacts(&outcome, &dir, &opts)?;
            print_report(&outcome.report);
            log.info(format!("artifacts written to {}", dir.display()));
            println!("{}", dir.display());
            Ok(())
        }
        Command::Replay { dir } => {
            let summary = runner::replay(&dir)?;
            println!("metrics verified: {} runs, config {}", summary.runs_verified, summary.config_hash);
            Ok(())
        }
        Command::Sweep { run, fracs } => {
            let (cfg, opts) = load(&run)?;
            let (report, outcomes) = runner::timing_sweep(&cfg, &fracs, &opts)?;
            let dir = fresh_dir(&run.out, &format!("{}-sweep", cfg.name))?;
            for outcome in &outcomes {
                let frac = outcome.config.perturbations[0].start_frac;
                let sub = dir.join(format!("start-{frac:.2}"));
                log.debug(format!("writing {}", sub.display()));
                runner::write_artifacts(outcome, &sub, &opts)?;
            }
            runner::artifacts::write_json(&dir.join("sweep.json"), &report)?;
            println!("{:>6} {:>6} {:>6} {:>9} {:>10}", "start", "t_s", "P_div", "collapsed", "mean RT");
            for row in &report.rows {
                println!(
                    "{:>6.2} {:>6} {:>6.2} {:>9} {:>10}",
                    row.start_frac,
                    row.t_s,
                    row.p_div,
                    row.collapsed,
                    fmt_opt(row.mean_recovery_time)
                );
            }
            log.info(format!("artifacts written to {}", dir.display()));
            println!("{}", dir.display());
            Ok(())
        }
        Command::Analyze { dirs, json } => {
            let rows = analyze(&dirs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows).expect("serializable"));
                return Ok(());
            }
            println!(
                "{:<28} {:<24} {:>4} {:>4} {:>14} {:>14} {:>7} {:>7}",
                "learner", "perturbation", "col", "stab", "MSD collapse", "MSD stable", "ratio", "alarm"
            );
            for r in &rows {
                println!(
                    "{:<28} {:<24} {:>4} {:>4} {:>14} {:>14} {:>7} {:>7}",
                    r.learner,
                    r.perturbation,
                    r.collapsed,
                    r.stable,
                    fmt_stat(&r.collapse_msd),
                    fmt_stat(&r.stable_msd),
                    fmt_opt(r.msd_ratio),
                    fmt_opt(r.alarm_before_collapse)
                );
            }
            Ok(())
        }
        Command::Compare { reports, json } => {
            let rows = compare(&reports)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows).expect("serializable"));
                return Ok(());
            }
            println!(
                "{:<14} {:<28} {:<24} {:>6} {:>10} {:>10} {:>10}",
                "config", "learner", "perturbation", "P_div", "RT", "SIP", "MSD"
            );
            for r in &rows {
                println!(
                    "{:<14} {:<28} {:<24} {:>6.2} {:>10} {:>10} {:>10}",
                    &r.config_hash[..12.min(r.config_hash.len())],
                    r.learner,
                    r.perturbation,
                    r.p_div,
                    fmt_opt(r.recovery_time),
                    fmt_opt(r.spike_intensity),
                    fmt_opt(r.meta_state_deviation)
                );
            }
            Ok(())
        }
        Command::Export { dir, what, output } => {
            let kind: ExportKind = what.parse()?;
            match output {
                Some(path) => {
                    if path.exists() {
                        return Err(Error::Config(format!("{} already exists; refusing to overwrite", path.display())));
                    }
                    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    export_csv(&dir, kind, std::io::BufWriter::new(file))
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    export_csv(&dir, kind, &mut lock)?;
                    lock.flush().map_err(|e| Error::io("<stdout>", e))
                }
            }
        }
    }
}

fn load(args: &RunArgs) -> Result<(AuditConfig, RunOptions), Error> {
    let seed_env = std::env::var("SB_SEED").ok();
    let cfg = AuditConfig::load(&args.config, &args.overrides, seed_env.as_deref())?;
    Ok((
        cfg,
        RunOptions {
            jobs: args.jobs,
            seed_override: seed_env,
        },
    ))
}

/// `<parent>/<name>-<UTC timestamp>`, with a numeric suffix if that exists.
fn fresh_dir(parent: &Path, name: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{name}-{stamp}");
    for n in 0.. {
        let candidate = if n == 0 { parent.join(&base) } else { parent.join(format!("{base}-{n}")) };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&candidate, e)),
        }
    }
    unreachable!()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn fmt_stat(s: &Stat) -> String {
    match (s.mean, s.se) {
        (Some(m), Some(se)) => format!("{m:.3}±{se:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "-".into(),
    }
}

fn print_report(report: &AuditReport) {
    println!(
        "{:<28} {:<24} {:>6} {:>4} {:>14} {:>14} {:>14} {:>14}",
        "learner", "perturbation", "P_div", "col", "T_c", "RT", "SIP", "MSD"
    );
    for c in &report.cells {
        println!(
            "{:<28} {:<24} {:>6.2} {:>4} {:>14} {:>14} {:>14} {:>14}",
            c.learner,
            c.perturbation,
            c.p_div,
            c.collapsed,
            fmt_stat(&c.collapse_time),
            fmt_stat(&c.recovery_time),
            fmt_stat(&c.spike_intensity),
            fmt_stat(&c.meta_state_deviation)
        );
    }
}
