//! Optimization loops: masked pretraining on a source city, forecast
//! fine-tuning with a separate location-embedding learning rate, and
//! training from scratch.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mobility::{
    build_forecast_windows, build_mlm_windows, Grid, SequenceExample, Split, UserTrajectory, WindowConfig,
};
use crate::model::{parse, Model};
use crate::moe::expert_load;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, ParamGroup};
use crate::rng;

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_MLM: u64 = 3;
const TAG_HELDOUT: u64 = 4;
const TAG_RESET: u64 = 5;

pub const GROUP_BASE: &str = "base";
pub const GROUP_LOCATION: &str = "location";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Scratch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            "scratch" => Ok(Phase::Scratch),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub base_lr: f64,
    /// Location-embedding learning rate; only used in the finetune phase.
    pub loc_emb_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub clip_norm: f64,
    /// Linear warmup length in steps; 0 keeps the learning rate constant.
    pub warmup_steps: u64,
    /// Re-draw the location table before fine-tuning.
    pub reset_loc_emb: bool,
    pub window: WindowConfig,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            base_lr: 3e-4,
            loc_emb_lr: 3e-4,
            weight_decay: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            clip_norm: 1.0,
            warmup_steps: 0,
            reset_loc_emb: false,
            window: WindowConfig::default(),
        }
    }

    /// Location embeddings learn ten times faster than the rest.
    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            base_lr: 5e-5,
            loc_emb_lr: 5e-4,
            epochs: 5,
            ..Self::pretrain()
        }
    }

    pub fn scratch() -> Self {
        Self {
            phase: Phase::Scratch,
            epochs: 5,
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Finetune => Self::finetune(),
            Phase::Scratch => Self::scratch(),
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "base_lr",
        "loc_emb_lr",
        "weight_decay",
        "batch_size",
        "epochs",
        "seed",
        "clip_norm",
        "warmup_steps",
        "reset_loc_emb",
        "history_len",
        "horizon",
        "min_observed",
        "history_from_test",
        "day0_weekday",
        "mask_ratio",
        "mlm_stride",
    ];

    /// Sets one key; returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.window;
        match key {
            "base_lr" => self.base_lr = parse(key, value)?,
            "loc_emb_lr" => self.loc_emb_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "reset_loc_emb" => self.reset_loc_emb = parse(key, value)?,
            "history_len" => w.history_len = parse(key, value)?,
            "horizon" => w.horizon = parse(key, value)?,
            "min_observed" => w.min_observed = parse(key, value)?,
            "history_from_test" => w.history_from_test = parse_switch(key, value)?,
            "day0_weekday" => w.calendar.day0_weekday = parse(key, value)?,
            "mask_ratio" => w.mask_ratio = parse(key, value)?,
            "mlm_stride" => w.mlm_stride = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = &self.window;
        vec![
            ("phase", self.phase.as_str().to_string()),
            ("base_lr", format!("{:?}", self.base_lr)),
            ("loc_emb_lr", format!("{:?}", self.loc_emb_lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("reset_loc_emb", self.reset_loc_emb.to_string()),
            ("history_len", w.history_len.to_string()),
            ("horizon", w.horizon.to_string()),
            ("min_observed", w.min_observed.to_string()),
            ("history_from_test", w.history_from_test.to_string()),
            ("day0_weekday", w.calendar.day0_weekday.to_string()),
            ("mask_ratio", format!("{:?}", w.mask_ratio)),
            ("mlm_stride", w.mlm_stride.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.loc_emb_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.window.calendar.day0_weekday > 6 {
            return Err(Error::Config("day0_weekday must be in 0..=6".into()));
        }
        Ok(())
    }

    /// `(base, location)` learning rates as used by the optimizer.
    pub fn learning_rates(&self) -> (f64, f64) {
        match self.phase {
            Phase::Finetune => (self.base_lr, self.loc_emb_lr),
            _ => (self.base_lr, self.base_lr),
        }
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected on/off, got {other:?}"))),
    }
}

/// Builds the optimizer for a phase: two groups (location table, everything
/// else) when fine-tuning, a single group otherwise.
pub fn build_optimizer(model: &Model, cfg: &TrainConfig) -> Result<AdamW> {
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let store = &model.params;
    match cfg.phase {
        Phase::Finetune => {
            let loc = model.location_table();
            let groups = vec![
                ParamGroup {
                    name: GROUP_LOCATION.to_string(),
                    lr: cfg.loc_emb_lr,
                    params: vec![loc],
                },
                ParamGroup {
                    name: GROUP_BASE.to_string(),
                    lr: cfg.base_lr,
                    params: store.ids().filter(|&id| id != loc).collect(),
                },
            ];
            AdamW::new(adam, groups, store)
        }
        _ => AdamW::single_group(adam, cfg.base_lr, store),
    }
}

/// Mean cross-entropy over the loss-masked positions of `ex`, given logits
/// for every position.
pub fn loss_forecast(g: &mut Graph, logits: Var, ex: &SequenceExample) -> Result<Var> {
    let targets: Vec<usize> = ex.targets.iter().map(|t| t.unwrap_or(0) as usize).collect();
    g.cross_entropy(logits, &targets, &ex.loss_mask)
}

/// Loss for one example with logits computed at loss positions only.
fn example_loss(model: &Model, g: &mut Graph, ex: &SequenceExample) -> Result<(Var, Var, f64)> {
    let positions = ex.loss_positions();
    if positions.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let f = model.forward(g, ex, &positions)?;
    let targets = ex.loss_targets();
    let keep = vec![true; targets.len()];
    let mut loss = g.cross_entropy(f.logits, &targets, &keep)?;
    let max_logit = g
        .value(f.logits)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if let Some(aux) = f.aux_loss {
        loss = g.add(loss, aux)?;
    }
    Ok((loss, f.gate_probs, max_logit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    /// Top-1 expert counts over the routed positions of the batch.
    pub expert_load: Vec<usize>,
}

/// Forward, backward, global-norm clipping and one optimizer update over a
/// batch. The batch loss is the mean of the per-example losses.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[SequenceExample], cfg: &TrainConfig) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let step = opt.step;
    model.params.zero_grads();
    let mut total = 0.0;
    let mut load = vec![0; model.config.moe.experts];
    let inv = 1.0 / batch.len() as f64;
    for (i, ex) in batch.iter().enumerate() {
        let mut g = Graph::new();
        if model.config.encoder.dropout > 0.0 {
            g = g.with_dropout_seed(rng::derive_seed(cfg.seed, &[TAG_DROPOUT, step, i as u64]));
        }
        let (loss, probs, max_logit) = example_loss(model, &mut g, ex)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                batch: step,
                loss: value,
                max_logit,
            });
        }
        total += value;
        for (l, c) in load.iter_mut().zip(expert_load(g.value(probs).data(), model.config.moe.experts)) {
            *l += c;
        }
        let scaled = g.scale(loss, inv);
        g.backward(scaled)?;
        g.accumulate_param_grads(&mut model.params);
    }
    model.mask_frozen_grads();
    let grad_norm = clip_grad_norm(&mut model.params, cfg.clip_norm);
    let scale = if cfg.warmup_steps > 0 {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    opt.update_scaled(&mut model.params, scale);
    model.restore_frozen();
    Ok(StepOutcome {
        loss: total * inv,
        grad_norm,
        expert_load: load,
    })
}

/// Eval-mode mean of per-example losses.
pub fn mean_loss(model: &Model, examples: &[SequenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::no_grad();
        let (loss, _, _) = example_loss(model, &mut g, ex)?;
        total += g.value(loss).item();
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based epoch number.
    pub epoch: u32,
    /// Optimizer steps completed so far.
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub lr_base: f64,
    pub lr_loc: f64,
    pub expert_load: Vec<usize>,
    /// Held-out masked loss (pretraining only).
    pub heldout_loss: Option<f64>,
}

/// One pass over `examples` in an order shuffled by `(seed, epoch)`.
pub fn run_epoch(
    model: &mut Model,
    opt: &mut AdamW,
    examples: &[SequenceExample],
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<EpochSummary> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::derived(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut total = 0.0;
    let mut steps = 0usize;
    let mut load = vec![0; model.config.moe.experts];
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<SequenceExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
        let out = train_step(model, opt, &batch, cfg)?;
        total += out.loss;
        steps += 1;
        for (l, c) in load.iter_mut().zip(out.expert_load) {
            *l += c;
        }
    }
    let (lr_base, lr_loc) = cfg.learning_rates();
    Ok(EpochSummary {
        epoch,
        step: opt.step,
        phase: cfg.phase,
        loss: if steps == 0 { f64::NAN } else { total / steps as f64 },
        lr_base,
        lr_loc,
        expert_load: load,
        heldout_loss: None,
    })
}

/// First day of the pretraining hold-out: the last 10% of training days.
pub fn heldout_start(cfg: &WindowConfig) -> u16 {
    let t = cfg.test_start as u32;
    (t - t.div_ceil(10)) as u16
}

/// Masked-modeling windows for one pretraining epoch (days before the
/// hold-out), masked with a stream derived from `(seed, epoch)`.
pub fn pretrain_examples(users: &[UserTrajectory], grid: Grid, cfg: &TrainConfig, epoch: u32) -> Result<Vec<SequenceExample>> {
    let mut rng = rng::derived(cfg.seed, &[TAG_MLM, epoch as u64]);
    let end = heldout_start(&cfg.window);
    let mut out = Vec::new();
    for u in users {
        out.extend(build_mlm_windows(u, 0..end, grid, &cfg.window, &mut rng)?);
    }
    Ok(out)
}

/// Fixed masked-modeling windows over the hold-out days.
pub fn heldout_examples(users: &[UserTrajectory], grid: Grid, cfg: &TrainConfig) -> Result<Vec<SequenceExample>> {
    let mut rng = rng::derived(cfg.seed, &[TAG_HELDOUT]);
    let range = heldout_start(&cfg.window)..cfg.window.test_start;
    let mut out = Vec::new();
    for u in users {
        out.extend(build_mlm_windows(u, range.clone(), grid, &cfg.window, &mut rng)?);
    }
    Ok(out)
}

/// Forecast windows on training days (future-span masking).
pub fn forecast_train_examples(users: &[UserTrajectory], grid: Grid, cfg: &WindowConfig) -> Result<Vec<SequenceExample>> {
    let mut out = Vec::new();
    for u in users {
        out.extend(build_forecast_windows(u, Split::Train, grid, cfg)?);
    }
    Ok(out)
}

/// Masked pretraining for epochs `start_epoch+1 ..= cfg.epochs`. After each
/// epoch the held-out loss is computed and `on_epoch` is called, which is
/// where checkpoints get written.
pub fn pretrain<F>(
    model: &mut Model,
    opt: &mut AdamW,
    users: &[UserTrajectory],
    cfg: &TrainConfig,
    start_epoch: u32,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochSummary, &Model, &AdamW) -> Result<()>,
{
    cfg.validate()?;
    let grid = model.grid;
    let heldout = heldout_examples(users, grid, cfg)?;
    for epoch in start_epoch + 1..=cfg.epochs {
        let examples = pretrain_examples(users, grid, cfg, epoch)?;
        if examples.is_empty() {
            return Err(Error::Config("no pretraining windows".into()));
        }
        let mut summary = run_epoch(model, opt, &examples, cfg, epoch)?;
        if !heldout.is_empty() {
            summary.heldout_loss = Some(mean_loss(model, &heldout)?);
        }
        on_epoch(&summary, model, opt)?;
    }
    Ok(())
}

/// Forecast training (fine-tuning or from scratch) for epochs
/// `start_epoch+1 ..= cfg.epochs`.
pub fn train_forecast<F>(
    model: &mut Model,
    opt: &mut AdamW,
    users: &[UserTrajectory],
    cfg: &TrainConfig,
    start_epoch: u32,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochSummary, &Model, &AdamW) -> Result<()>,
{
    cfg.validate()?;
    let examples = forecast_train_examples(users, model.grid, &cfg.window)?;
    if examples.is_empty() && cfg.epochs > start_epoch {
        return Err(Error::Config("no training windows".into()));
    }
    for epoch in start_epoch + 1..=cfg.epochs {
        let summary = run_epoch(model, opt, &examples, cfg, epoch)?;
        on_epoch(&summary, model, opt)?;
    }
    Ok(())
}

/// Prepares a pretrained model for fine-tuning: checks that the
/// architecture matches and optionally re-draws the location table.
pub fn prepare_finetune(model: &mut Model, expected: &crate::ModelConfig, cfg: &TrainConfig) -> Result<()> {
    let diff = model.config.architecture_diff(expected);
    if !diff.is_empty() {
        return Err(Error::Architecture(diff.join(", ")));
    }
    if cfg.reset_loc_emb {
        model.reset_location_embeddings(rng::derive_seed(cfg.seed, &[TAG_RESET]));
    }
    Ok(())
}
