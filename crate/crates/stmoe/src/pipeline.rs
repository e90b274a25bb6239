//! The commands behind the executable, callable as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use stmoe_core::baselines::FrequencyTable;
use stmoe_core::gradcheck::{self, GradcheckReport};
use stmoe_core::metrics::{evaluate_pairs, predict_pairs, EvalReport, Predictor};
use stmoe_core::mobility::{build_forecast_windows, Grid, SequenceExample, Split, SynthParams, UserTrajectory};
use stmoe_core::train::{self, build_optimizer, EpochSummary, Phase, TrainConfig};
use stmoe_core::Model;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data;
use crate::error::{AppError, AppResult};
use crate::report::{self, TrainLogs};

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_GATE: f64 = 1e-3;

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

/// A checkpoint path, or a run directory (its `best`, else `last`).
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        let best = path.join("best");
        if best.exists() {
            return best;
        }
        return path.join("last");
    }
    path.to_path_buf()
}

fn link(dir: &Path, name: &str, target: &str) -> AppResult<()> {
    let at = dir.join(name);
    if at.symlink_metadata().is_ok() {
        std::fs::remove_file(&at).map_err(|e| AppError::io(&at, e))?;
    }
    #[cfg(unix)]
    let r = std::os::unix::fs::symlink(target, &at);
    #[cfg(not(unix))]
    let r = std::fs::copy(dir.join(target), &at).map(|_| ());
    r.map_err(|e| AppError::io(&at, e))
}

pub fn generate(out: &Path, users: usize, grid_side: usize, seed: u64, params_file: Option<&Path>) -> AppResult<usize> {
    if users == 0 {
        return Err(AppError::Usage("--users must be positive".into()));
    }
    let grid = Grid::new(grid_side).map_err(|e| AppError::Usage(e.to_string()))?;
    let mut params = SynthParams::default();
    if let Some(p) = params_file {
        let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("params line {}: expected key=value", i + 1)))?;
            data::set_synth_param(&mut params, k.trim(), v)?;
        }
    }
    Ok(data::generate(out, users, grid, seed, &params)?.len())
}

pub struct TrainRequest<'a> {
    pub phase: Phase,
    pub data: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    /// Pretrained checkpoint (fine-tuning only).
    pub from: Option<&'a Path>,
    /// Checkpoint of this same run to continue from.
    pub resume: Option<&'a Path>,
}

/// Training state restored from a checkpoint's `train.*` metadata.
fn train_config_from(ckpt: &Checkpoint, cfg: &mut TrainConfig) -> AppResult<()> {
    for (k, v) in &ckpt.metadata {
        if let Some(key) = k.strip_prefix("train.") {
            if key == "phase" {
                cfg.phase = Phase::parse(v).map_err(|e| AppError::Checkpoint(e.to_string()))?;
            } else if !cfg.set(key, v).map_err(|e| AppError::Checkpoint(e.to_string()))? {
                return Err(AppError::Checkpoint(format!("unknown training key {key}")));
            }
        }
    }
    Ok(())
}

fn metadata(summary: Option<&EpochSummary>, epoch: u32, step: u64, cfg: &TrainConfig) -> Vec<(String, String)> {
    let mut m = vec![
        ("format".to_string(), "stmoe".to_string()),
        ("phase".to_string(), cfg.phase.as_str().to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("step".to_string(), step.to_string()),
    ];
    if let Some(h) = summary.and_then(|s| s.heldout_loss) {
        m.push(("heldout_loss".to_string(), format!("{h:?}")));
    }
    if let Some(s) = summary {
        m.push(("train_loss".to_string(), format!("{:?}", s.loss)));
    }
    // Every random stream (masking, shuffling, dropout) is derived from the
    // seed and the epoch/step counters above.
    for (k, v) in cfg.to_pairs() {
        m.push((format!("train.{k}"), v));
    }
    m
}

/// Result of a training command.
#[derive(Debug)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub epochs: Vec<EpochSummary>,
}

pub fn train(req: &TrainRequest) -> AppResult<TrainOutcome> {
    let mut rc = RunConfig::new(req.phase);
    let resume = req.resume.map(|p| Checkpoint::load(&resolve_checkpoint(p))).transpose()?;
    let from = match (req.phase, req.from) {
        (Phase::Finetune, None) if resume.is_none() => {
            return Err(AppError::Usage("finetune needs --from <checkpoint>".into()))
        }
        (Phase::Finetune, Some(p)) => Some(Checkpoint::load(&resolve_checkpoint(p))?),
        (_, Some(_)) => return Err(AppError::Usage("--from is only valid for finetune".into())),
        _ => None,
    };
    if let Some(c) = resume.as_ref().or(from.as_ref()) {
        rc.model = c.model_config()?;
    }
    if let Some(c) = &resume {
        train_config_from(c, &mut rc.train)?;
        if rc.train.phase != req.phase {
            return Err(AppError::Mismatch(format!(
                "cannot resume a {} run as {}",
                rc.train.phase.as_str(),
                req.phase.as_str()
            )));
        }
    }
    let expected = rc.model;
    if let Some(p) = req.config {
        rc.apply_file(p)?;
    }
    for kv in req.overrides {
        rc.apply_override(kv)?;
    }
    rc.finish()?;
    if (resume.is_some() || from.is_some()) && rc.model != expected {
        let diff = expected.architecture_diff(&rc.model);
        if !diff.is_empty() {
            return Err(AppError::Mismatch(diff.join(", ")));
        }
    }
    let cfg = rc.train;
    let grid = rc.model.grid()?;
    let users = data::load_city(req.data, grid)?;

    std::fs::create_dir_all(req.out).map_err(|e| AppError::io(req.out, e))?;
    let cfg_path = req.out.join("config.txt");
    std::fs::write(&cfg_path, format!("phase={}\n{}", cfg.phase.as_str(), rc.to_text()))
        .map_err(|e| AppError::io(&cfg_path, e))?;

    let (mut model, mut opt, start_epoch) = if let Some(c) = &resume {
        let model = c.model_with(rc.model)?;
        let mut opt = build_optimizer(&model, &cfg)?;
        c.restore_optimizer(&model, &mut opt)?;
        (model, opt, c.require::<u32>("epoch")?)
    } else {
        let mut model = match &from {
            Some(c) => c.model_with(rc.model)?,
            None => Model::new(rc.model, cfg.seed)?,
        };
        if from.is_some() {
            train::prepare_finetune(&mut model, &expected, &cfg)?;
        }
        let opt = build_optimizer(&model, &cfg)?;
        (model, opt, 0)
    };

    let mut logs = TrainLogs::open(req.out, start_epoch)?;
    let mut best: Option<(f64, String)> = match &resume {
        Some(_) => best_so_far(req.out, start_epoch)?,
        None => None,
    };
    if resume.is_none() {
        let name = checkpoint_name(0);
        Checkpoint::capture(&model, Some(&opt), metadata(None, 0, 0, &cfg)).save(&req.out.join(&name))?;
        link(req.out, "last", &name)?;
    }

    let mut epochs = Vec::new();
    let mut failure: Option<AppError> = None;
    let started = Instant::now();
    let out_dir = req.out;
    let mut on_epoch = |s: &EpochSummary, m: &Model, o: &stmoe_core::optim::AdamW| -> stmoe_core::Result<()> {
        let r = (|| -> AppResult<()> {
            let name = checkpoint_name(s.epoch);
            Checkpoint::capture(m, Some(o), metadata(Some(s), s.epoch, s.step, &cfg)).save(&out_dir.join(&name))?;
            link(out_dir, "last", &name)?;
            if let Some(h) = s.heldout_loss {
                if best.as_ref().is_none_or(|(b, _)| h < *b) {
                    best = Some((h, name.clone()));
                    link(out_dir, "best", &name)?;
                }
            }
            logs.record(s)?;
            eprintln!(
                "{} epoch {}/{} loss {:.4}{} ({:.0}s)",
                s.phase.as_str(),
                s.epoch,
                cfg.epochs,
                s.loss,
                s.heldout_loss.map(|h| format!(" heldout {h:.4}")).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
            epochs.push(s.clone());
            Ok(())
        })();
        r.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            stmoe_core::Error::Config(msg)
        })
    };
    let result = match cfg.phase {
        Phase::Pretrain => train::pretrain(&mut model, &mut opt, &users, &cfg, start_epoch, &mut on_epoch),
        _ => train::train_forecast(&mut model, &mut opt, &users, &cfg, start_epoch, &mut on_epoch),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    Ok(TrainOutcome {
        last: out_dir.join("last"),
        best: best.map(|(_, n)| out_dir.join(n)),
        epochs,
    })
}

/// Lowest held-out loss among checkpoints `1..=through` already on disk.
fn best_so_far(dir: &Path, through: u32) -> AppResult<Option<(f64, String)>> {
    let mut best: Option<(f64, String)> = None;
    for e in 1..=through {
        let name = checkpoint_name(e);
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let c = Checkpoint::load(&path)?;
        if let Some(h) = c.get("heldout_loss").and_then(|v| v.parse::<f64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| h < *b) {
                best = Some((h, name));
            }
        }
    }
    Ok(best)
}

/// Which predictor `evaluate` runs.
pub enum Evaluated<'a> {
    Model(&'a Path),
    Frequency,
}

pub struct EvalRequest<'a> {
    pub predictor: Evaluated<'a>,
    pub data: &'a Path,
    pub report: &'a Path,
    pub city: Option<&'a str>,
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub predictions: Option<&'a Path>,
}

pub fn test_windows(users: &[UserTrajectory], grid: Grid, cfg: &TrainConfig) -> AppResult<Vec<SequenceExample>> {
    let mut out = Vec::new();
    for u in users {
        out.extend(build_forecast_windows(u, Split::Test, grid, &cfg.window)?);
    }
    Ok(out)
}

pub fn evaluate(req: &EvalRequest) -> AppResult<EvalReport> {
    let mut rc = RunConfig::new(Phase::Scratch);
    let model = match req.predictor {
        Evaluated::Model(p) => {
            let c = Checkpoint::load(&resolve_checkpoint(p))?;
            rc.model = c.model_config()?;
            train_config_from(&c, &mut rc.train)?;
            Some(c)
        }
        Evaluated::Frequency => None,
    };
    let expected = rc.model;
    if let Some(p) = req.config {
        rc.apply_file(p)?;
    }
    for kv in req.overrides {
        rc.apply_override(kv)?;
    }
    rc.finish()?;
    if model.is_some() {
        let diff = expected.architecture_diff(&rc.model);
        if !diff.is_empty() {
            return Err(AppError::Mismatch(diff.join(", ")));
        }
    }
    let model = model.map(|c| c.model_with(rc.model)).transpose()?;
    let grid = rc.model.grid()?;
    let users = data::load_city(req.data, grid)?;
    let windows = test_windows(&users, grid, &rc.train)?;
    if windows.is_empty() {
        return Err(AppError::Failed(format!("{}: no test windows", req.data.display())));
    }
    let table;
    let predictor: &dyn Predictor = match &model {
        Some(m) => m,
        None => {
            table = FrequencyTable::fit(
                &users,
                grid,
                rc.train.window.calendar,
                rc.hf_day_type,
                rc.train.window.test_start,
            )?;
            &table
        }
    };
    let pairs = predict_pairs(predictor, grid, &windows)?;
    if let Some(p) = req.predictions {
        let preds: Vec<Vec<u32>> = windows
            .iter()
            .map(|w| predictor.predict_window(w))
            .collect::<Result<_, _>>()?;
        report::write_predictions(p, grid, &windows, &preds)?;
    }
    let result = evaluate_pairs(&pairs, &rc.geo_bleu)?;
    let city = match req.city {
        Some(c) => c.to_string(),
        None => req
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "city".into()),
    };
    report::write_report(req.report, &city, &result)?;
    Ok(result)
}

pub fn gradcheck(config: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> AppResult<GradcheckReport> {
    let mut rc = RunConfig::new(Phase::Scratch);
    if let Some(p) = config {
        rc.apply_file(p)?;
    }
    for kv in overrides {
        rc.apply_override(kv)?;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    rc.finish()?;
    Ok(gradcheck::run(&rc.gradcheck)?)
}
