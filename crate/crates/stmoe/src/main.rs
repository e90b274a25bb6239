use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use stmoe::config::keys_help;
use stmoe::data::SYNTH_KEYS;
use stmoe::pipeline::{self, EvalRequest, Evaluated, TrainRequest, GRADCHECK_GATE};
use stmoe::{AppError, AppResult};
use stmoe_core::train::Phase;

/// Mobility prediction with a spatial-temporal mixture-of-experts transformer.
#[derive(Parser)]
#[command(name = "stmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic city CSV and its `.params` sidecar.
    Generate {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings as key=value lines.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Masked-location pretraining on a source city.
    Pretrain(TrainArgs),
    /// Fine-tune a pretrained checkpoint on a target city.
    Finetune {
        /// Pretrained checkpoint, or a run directory (uses its `best`).
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train the forecaster directly on a city, without pretraining.
    TrainScratch(TrainArgs),
    /// Score a checkpoint or the frequency baseline on a city's test days.
    Evaluate {
        /// Checkpoint or run directory.
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        model: Option<PathBuf>,
        /// Baseline to evaluate instead of a model (only `hf`).
        #[arg(long, value_parser = ["hf"])]
        baseline: Option<String>,
        /// City CSV (`uid,d,t,x,y`).
        #[arg(long)]
        data: PathBuf,
        /// Per-window report CSV; the summary line also goes to `<report>.summary`.
        #[arg(long)]
        report: PathBuf,
        /// City name written in the report (default: data file stem).
        #[arg(long)]
        city: Option<String>,
        /// Also write predicted cells as `uid,d,t,x,y`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare analytic gradients of every parameter tensor with finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// City CSV (`uid,d,t,x,y`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn synth_help() -> String {
    let mut s = String::from("Generator keys for --params (key=value):\n");
    for (k, d) in SYNTH_KEYS {
        s.push_str(&format!("  {k:<18} {d}\n"));
    }
    s
}

fn train(phase: Phase, from: Option<PathBuf>, a: TrainArgs) -> AppResult<()> {
    let mut overrides = a.common.overrides;
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let out = pipeline::train(&TrainRequest {
        phase,
        data: &a.data,
        out: &a.out,
        config: a.common.config.as_deref(),
        overrides: &overrides,
        from: from.as_deref(),
        resume: a.resume.as_deref(),
    })?;
    if let Some(b) = out.best {
        println!("best={}", b.display());
    }
    println!("last={}", out.last.display());
    Ok(())
}

fn run(command: Command) -> AppResult<()> {
    match command {
        Command::Generate {
            out,
            users,
            grid,
            seed,
            params,
        } => {
            let n = pipeline::generate(&out, users, grid, seed, params.as_deref())?;
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Command::Pretrain(a) => train(Phase::Pretrain, None, a),
        Command::Finetune { from, args } => train(Phase::Finetune, from, args),
        Command::TrainScratch(a) => train(Phase::Scratch, None, a),
        Command::Evaluate {
            model,
            baseline,
            data,
            report,
            city,
            predictions,
            common,
        } => {
            let predictor = match (&model, baseline) {
                (Some(m), _) => Evaluated::Model(m),
                (None, Some(_)) => Evaluated::Frequency,
                (None, None) => return Err(AppError::Usage("give --model or --baseline hf".into())),
            };
            let r = pipeline::evaluate(&EvalRequest {
                predictor,
                data: &data,
                report: &report,
                city: city.as_deref(),
                config: common.config.as_deref(),
                overrides: &common.overrides,
                predictions: predictions.as_deref(),
            })?;
            let name = city.unwrap_or_else(|| data.file_stem().map_or("city".into(), |s| s.to_string_lossy().into_owned()));
            println!("{}", stmoe::report::summary_line(&name, &r));
            Ok(())
        }
        Command::Gradcheck { seed, common } => {
            let r = pipeline::gradcheck(common.config.as_deref(), seed, &common.overrides)?;
            for t in &r.tensors {
                println!("H={:<3} K={:<2} {:<28} checked={} max_rel_err={:.3e}", t.hidden, t.experts, t.name, t.checked, t.max_rel_err);
            }
            println!("max_rel_err={:.3e}", r.max_rel_err);
            if !r.passes(GRADCHECK_GATE) {
                return Err(AppError::Failed(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_GATE:e}",
                    r.max_rel_err
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let keys = keys_help();
    let cmd = Cli::command().mut_subcommands(|sc| {
        let help = if sc.get_name() == "generate" { synth_help() } else { keys.clone() };
        sc.after_help(help)
    });
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(64);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
