use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use crossnet::distill::fmt_sig6;
use crossnet::harness::{self, HarnessError, RunConfig};

/// Train and evaluate cross-enhanced two-stream 3D ConvNets on the synthetic
/// motion benchmark.
#[derive(Parser)]
#[command(name = "crossnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run config; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key (repeatable, last wins).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent runs during a sweep.
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into data.dir.
    GenData,
    /// Compute and cache TV-L1 flow for every clip.
    PrecomputeFlow,
    /// Train the stronger stream alone.
    TrainTeacher,
    /// Train the weaker stream against the frozen teacher.
    TrainStudent,
    /// Train the fusion layer over both streams.
    TrainFusion,
    /// Test-split accuracy of both streams and their fusion.
    Evaluate,
    /// Train one student per bridge and pick the best.
    Sweep,
    /// Baseline-versus-enhanced table over every eval.csv under a directory.
    Report {
        /// Defaults to the run directory.
        dir: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(common.sets.iter().map(String::as_str))?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(n) = common.parallel {
        cfg.parallel = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn last_epoch(records: &[crossnet::distill::TrainRunRecord]) -> String {
    records.last().map_or("no epochs run".into(), |r| {
        format!(
            "epoch {}: total {} train_acc {} test_acc {}",
            r.epoch,
            fmt_sig6(r.loss.total),
            fmt_sig6(r.train_acc),
            fmt_sig6(r.test_acc)
        )
    })
}

fn run(cli: Cli) -> Result<String, HarnessError> {
    let cfg = resolve(&cli.common)?;
    Ok(match cli.command {
        Command::GenData => {
            let m = harness::gen_data(&cfg)?;
            format!("wrote {} clips to {}", m.clips.len(), cfg.data_dir().display())
        }
        Command::PrecomputeFlow => {
            let n = harness::precompute_flow(&cfg)?;
            format!("cached flow for {n} clips in {}", cfg.data_dir().display())
        }
        Command::TrainTeacher => last_epoch(&harness::train_teacher(&cfg)?),
        Command::TrainStudent => last_epoch(&harness::train_student(&cfg)?),
        Command::TrainFusion => last_epoch(&harness::train_fusion(&cfg)?),
        Command::Evaluate => {
            let r = harness::evaluate(&cfg)?;
            format!(
                "{} {}: rgb {} flow {} fused {}",
                r.regime,
                r.pipeline,
                fmt_sig6(r.rgb),
                fmt_sig6(r.flow),
                fmt_sig6(r.fused)
            )
        }
        Command::Sweep => {
            let outcome = harness::sweep(&cfg)?;
            let failed = outcome.runs.iter().filter(|r| r.result.is_err()).count();
            let best = outcome.best.map_or("none".into(), |i| outcome.runs[i].bridge.to_string());
            format!("{} runs, {failed} failed, best bridge {best}", outcome.runs.len())
        }
        Command::Report { dir } => {
            let report = harness::report(&dir.unwrap_or_else(|| cfg.out.clone()))?;
            report.text.trim_end().to_string()
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
