use std::path::PathBuf;
use std::process::ExitCode;

use aha_cli::commands::{Axis, EvalOptions};
use aha_cli::{cmd_analyze, cmd_eval, cmd_sweep, cmd_train, exit_code, ExperimentConfig, Precision};
use aha_core::model::GateForcing;
use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aha", version, about = "Routed full / sliding-window attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, metrics and usage report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a task, optionally forcing every gate.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// counting, needle, local_lm or mixed
        #[arg(long, default_value = "mixed")]
        task: String,
        #[arg(long, default_value = "auto")]
        force_gates: GateForcing,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        key_distance: Option<usize>,
        /// Inference window (warns when it differs from training).
        #[arg(long)]
        window: Option<usize>,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-sample gate traces.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Train over a window or lambda axis for several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// w=4,8,16,32 or lambda=0,0.003,0.03
        #[arg(long)]
        axis: Axis,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a directory of gate traces into report files.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let s = cmd_train(&config, &out, Precision::from_env()?)?;
            let last = s.records.last().expect("at least one step");
            println!(
                "trained {} steps: lm_loss {:.4}, held-out accuracy {:.4}, mu_f {:.4} -> {}",
                last.step,
                last.lm_loss,
                s.metrics.accuracy,
                s.metrics.usage.mu_f_overall,
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            task,
            force_gates,
            samples,
            seed,
            length,
            key_distance,
            window,
            out,
            traces,
        } => {
            let opts = EvalOptions {
                task,
                force_gates: Some(force_gates),
                samples,
                seed,
                length,
                key_distance,
                window,
                traces_out: traces,
            };
            let r = cmd_eval(&ckpt, &opts, Precision::from_env()?)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            let json = serde_json::to_string_pretty(&r.metrics)?;
            match out {
                Some(p) => std::fs::write(p, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::Sweep { config, axis, seeds, out } => {
            let base = ExperimentConfig::load(&config)?;
            let s = cmd_sweep(&base, &axis, seeds, &out, Precision::from_env()?)?;
            match s.report {
                Some(r) => {
                    print!("{}", r.to_csv());
                    if !r.is_monotone() {
                        eprintln!("warning: usage is not monotone along {}: {:?}", r.axis, r.violations);
                    }
                }
                None => println!("{} runs written to {}", s.runs.len(), out.display()),
            }
        }
        Command::Analyze { traces, out } => {
            let s = cmd_analyze(&traces, &out)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "analyzed {} traces ({} skipped): mu_f {:.4} -> {}",
                s.traces,
                s.skipped,
                s.mu_f,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

