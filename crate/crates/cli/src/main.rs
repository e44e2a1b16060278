use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use bricklayer::ablation::{run_matrix, ExperimentMatrix};
use bricklayer::audit::{rows_csv, run_audit, summary_csv, AuditConfig};
use bricklayer::checkpoint;
use bricklayer::gradcheck::{run_all, GradcheckOptions};
use bricklayer::protocol;
use bricklayer::report::{emit, write_atomic, RunMeta};
use bricklayer::taskgen::{generate_stream, write_stream_csv};
use bricklayer::{Error, ReportFormat, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bricklayer", version, about = "Incremental real/fake detection on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output.dir, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report formats to write.
    #[arg(long, value_parser = ["json", "csv", "both"])]
    format: Option<String>,
    /// Two-dimensional features with per-task feature dumps.
    #[arg(long)]
    toy2d: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full protocol and write the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written when stopping early.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many training steps and save a checkpoint.
        #[arg(long, requires = "checkpoint")]
        max_steps: Option<usize>,
    },
    /// Continue a checkpointed run.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["json", "csv", "both"])]
        format: Option<String>,
        /// Stop again after this many further steps, overwriting the checkpoint.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Compare replay strategies by MMD to the full domain.
    ReplayAudit {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one component's analytic gradient (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train and write per-task feature CSVs (and optionally the raw stream).
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        /// Also write the generated task stream as stream.csv.
        #[arg(long)]
        stream: bool,
    },
    /// Run an experiment matrix and write summary.csv.
    Matrix {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => Failure::Config(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().resolved()?,
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s)?;
    }
    if c.toy2d {
        cfg = cfg.toy2d()?;
    }
    if let Some(f) = &c.format {
        cfg.output.format = f.parse()?;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn finish_run(runner: &bricklayer::ProtocolRunner, cfg: &RunConfig, started: Instant) -> Result<(), Failure> {
    let report = protocol::report(runner, cfg)?;
    let dir = out_dir(cfg);
    let fmt = cfg.output.format;
    for p in emit(&report, &dir, fmt.json(), fmt.csv())? {
        println!("wrote {}", p.display());
    }
    let meta = RunMeta {
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    let meta_json = serde_json::to_string_pretty(&meta).context("serialize run meta")?;
    write_atomic(&dir.join("run_meta.json"), meta_json.as_bytes())?;
    println!("final average AUC {:.4}", report.final_avg_auc);
    Ok(())
}

fn drive(
    mut runner: bricklayer::ProtocolRunner,
    cfg: &RunConfig,
    max_steps: Option<usize>,
    ckpt: Option<&Path>,
    started: Instant,
) -> Result<(), Failure> {
    let mut steps = 0;
    while !runner.is_done() {
        if max_steps == Some(steps) {
            let path = ckpt.expect("clap requires --checkpoint with --max-steps");
            checkpoint::save(path, &runner, cfg)?;
            println!("checkpoint after {steps} steps: {}", path.display());
            return Ok(());
        }
        runner.advance()?;
        steps += 1;
    }
    finish_run(&runner, cfg, started)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    let started = Instant::now();
    match cmd {
        Command::Run {
            common,
            checkpoint,
            max_steps,
        } => {
            let cfg = load_config(&common)?;
            let runner = protocol::start(&cfg)?;
            drive(runner, &cfg, max_steps, checkpoint.as_deref(), started)
        }
        Command::Resume {
            checkpoint: path,
            out,
            format,
            max_steps,
        } => {
            let (runner, mut cfg) = checkpoint::load(&path)?;
            if let Some(o) = out {
                cfg.output.dir = Some(o);
            }
            if let Some(f) = format {
                cfg.output.format = f.parse::<ReportFormat>()?;
            }
            drive(runner, &cfg, max_steps, Some(&path), started)
        }
        Command::ReplayAudit { common } => {
            let cfg = load_config(&common)?;
            let audit = cfg.audit.clone().unwrap_or_else(AuditConfig::default);
            let (rows, summary) = run_audit(&cfg, &audit)?;
            let dir = out_dir(&cfg);
            write_atomic(&dir.join("audit.csv"), rows_csv(&rows).as_bytes())?;
            write_atomic(&dir.join("audit_summary.csv"), summary_csv(&summary).as_bytes())?;
            for s in &summary {
                println!("{:<15} median MMD {:.6} over {} rows", s.strategy.name(), s.median_mmd, s.rows);
            }
            Ok(())
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => {
            let results = run_all(&GradcheckOptions {
                instances,
                seed,
                fault: inject_fault,
            })?;
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed { "ok" } else { "FAIL" };
                println!("{:<18} {:>3} instances  max rel err {:.3e}  {verdict}", r.component, r.instances, r.max_rel_err);
                if !r.passed {
                    failed.push(r.component);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
        Command::ExportFeatures { common, stream } => {
            let mut cfg = load_config(&common)?;
            cfg.output.dump_features = true;
            let dir = out_dir(&cfg);
            if stream {
                let s = generate_stream(&cfg.protocol)?;
                let mut buf = Vec::new();
                write_stream_csv(&s, &mut buf)?;
                write_atomic(&dir.join("stream.csv"), &buf)?;
            }
            let report = bricklayer::run_protocol(&cfg)?;
            for (name, body) in report.feature_csvs() {
                let p = dir.join(name);
                write_atomic(&p, body.as_bytes())?;
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Matrix { matrix, out } => {
            let m = ExperimentMatrix::load(&matrix)?;
            let rows = run_matrix(&m, &out)?;
            for r in &rows {
                println!(
                    "{:<12} {:<15} median AUC {:.4}  Δ {:+.4}  wins {}/{}",
                    r.ablation,
                    r.strategy.name(),
                    r.median_final_auc,
                    r.median_delta_auc,
                    r.wins,
                    r.seeds
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("BRICKLAYER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not cap worker threads: {e}");
        }
    }
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
