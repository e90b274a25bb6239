//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are skipped.
//! Boolean keys accept `on`/`off` as well as `true`/`false`.

use std::path::Path;

use stmoe_core::baselines::DayType;
use stmoe_core::gradcheck::GradcheckConfig;
use stmoe_core::metrics::GeoBleuConfig;
use stmoe_core::train::{Phase, TrainConfig};
use stmoe_core::ModelConfig;

use crate::error::{AppError, AppResult};

/// Every recognized key with a one-line description, grouped for `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("grid", "grid side G; the city has G*G cells"),
    ("seq_len", "longest accepted sequence (history_len + horizon)"),
    ("emb_day", "day-index embedding width"),
    ("emb_time", "time-slot embedding width"),
    ("emb_dow", "day-of-week embedding width"),
    ("emb_weekend", "weekend-flag embedding width"),
    ("emb_loc", "location embedding width"),
    ("pos_emb", "add a learned positional embedding (on/off)"),
    ("layers", "encoder layers"),
    ("hidden", "encoder width H"),
    ("heads", "attention heads"),
    ("ffn", "encoder feed-forward width"),
    ("dropout", "dropout probability during training"),
    ("post_norm", "post-LN (true) or pre-LN (false) encoder blocks"),
    ("experts", "number of experts K"),
    ("top_k", "experts evaluated per position"),
    ("expert_ffn", "expert feed-forward width"),
    ("moe_residual", "add the encoder output to the expert mixture"),
    ("moe_aux_weight", "weight of the load-balancing loss (0 = off)"),
    ("use_cls", "prepend a CLS token"),
    ("base_lr", "learning rate of all non-location parameters"),
    ("loc_emb_lr", "learning rate of the location embedding when fine-tuning"),
    ("weight_decay", "decoupled weight decay"),
    ("batch_size", "windows per optimizer step"),
    ("epochs", "training epochs"),
    ("seed", "seed for initialization, shuffling, masking and dropout"),
    ("clip_norm", "global gradient-norm clip"),
    ("warmup_steps", "linear learning-rate warmup steps (0 = none)"),
    ("reset_loc_emb", "re-draw the location embedding before fine-tuning"),
    ("history_len", "observed records before the forecast day"),
    ("horizon", "slots predicted per window"),
    ("min_observed", "drop forecast days with fewer observed slots"),
    ("history_from_test", "allow earlier test days in the history (on/off)"),
    ("day0_weekday", "weekday of day 0 (0 = Monday)"),
    ("mask_ratio", "fraction of real tokens masked in pretraining windows"),
    ("mlm_stride", "records between consecutive pretraining windows"),
    ("geo_bleu_n", "largest n-gram order of GEO-BLEU"),
    ("geo_bleu_beta", "GEO-BLEU proximity decay per cell"),
    ("hf_day_type", "frequency baseline day buckets: dow or weekday_weekend"),
    ("gc_hidden", "gradcheck: comma-separated hidden sizes"),
    ("gc_experts", "gradcheck: comma-separated expert counts (top_k = K)"),
    ("gc_layers", "gradcheck: encoder layers"),
    ("gc_heads", "gradcheck: attention heads"),
    ("gc_seq_len", "gradcheck: probe window length"),
    ("gc_samples", "gradcheck: entries checked per tensor"),
    ("gc_step", "gradcheck: finite-difference step"),
];

pub fn keys_help() -> String {
    let mut s = String::from("Recognized config keys (key=value, '#' comments):\n");
    for (k, d) in KEY_DOCS {
        s.push_str(&format!("  {k:<18} {d}\n"));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub geo_bleu: GeoBleuConfig,
    pub hf_day_type: DayType,
    pub gradcheck: GradcheckConfig,
}

fn normalize(value: &str) -> &str {
    match value {
        "on" => "true",
        "off" => "false",
        v => v,
    }
}

fn list(key: &str, value: &str) -> AppResult<Vec<usize>> {
    value
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| AppError::Usage(format!("{key}: cannot parse {value:?}"))))
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> AppResult<T> {
    value
        .parse()
        .map_err(|_| AppError::Usage(format!("{key}: cannot parse {value:?}")))
}

pub fn day_type_name(d: DayType) -> &'static str {
    match d {
        DayType::DayOfWeek => "dow",
        DayType::WeekdayWeekend => "weekday_weekend",
    }
}

impl RunConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::for_phase(phase),
            geo_bleu: GeoBleuConfig::default(),
            hf_day_type: DayType::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> AppResult<()> {
        let value = normalize(value.trim());
        let usage = |e: stmoe_core::Error| AppError::Usage(e.to_string());
        if self.model.set(key, value).map_err(usage)? || self.train.set(key, value).map_err(usage)? {
            return Ok(());
        }
        let gc = &mut self.gradcheck;
        match key {
            "geo_bleu_n" => self.geo_bleu.max_n = num(key, value)?,
            "geo_bleu_beta" => self.geo_bleu.beta = num(key, value)?,
            "hf_day_type" => {
                self.hf_day_type = match value {
                    "dow" => DayType::DayOfWeek,
                    "weekday_weekend" => DayType::WeekdayWeekend,
                    _ => return Err(AppError::Usage(format!("hf_day_type: expected dow or weekday_weekend, got {value:?}"))),
                }
            }
            "gc_hidden" => gc.hidden = list(key, value)?,
            "gc_experts" => gc.experts = list(key, value)?,
            "gc_layers" => gc.layers = num(key, value)?,
            "gc_heads" => gc.heads = num(key, value)?,
            "gc_seq_len" => gc.seq_len = num(key, value)?,
            "gc_samples" => gc.samples = num(key, value)?,
            "gc_step" => gc.step = num(key, value)?,
            _ => return Err(AppError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; errors name the line number.
    pub fn apply_text(&mut self, text: &str) -> AppResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| AppError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> AppResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> AppResult<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v)
    }

    /// Keeps the model's sequence capacity in line with the window layout
    /// and the gradcheck grid with the model grid.
    pub fn finish(&mut self) -> AppResult<()> {
        let needed = self.train.window.seq_len() + usize::from(self.model.use_cls);
        if self.model.seq_len < needed {
            self.model.seq_len = needed;
        }
        self.gradcheck.grid_side = self.model.grid_side;
        self.gradcheck.seed = self.train.seed;
        self.model.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        self.geo_bleu.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Resolved configuration as `key=value` lines, in `KEY_DOCS` order.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = self.model.to_pairs();
        pairs.extend(self.train.to_pairs().into_iter().filter(|(k, _)| *k != "phase"));
        pairs.push(("geo_bleu_n", self.geo_bleu.max_n.to_string()));
        pairs.push(("geo_bleu_beta", format!("{:?}", self.geo_bleu.beta)));
        pairs.push(("hf_day_type", day_type_name(self.hf_day_type).to_string()));
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let gc = &self.gradcheck;
        pairs.push(("gc_hidden", join(&gc.hidden)));
        pairs.push(("gc_experts", join(&gc.experts)));
        pairs.push(("gc_layers", gc.layers.to_string()));
        pairs.push(("gc_heads", gc.heads.to_string()));
        pairs.push(("gc_seq_len", gc.seq_len.to_string()));
        pairs.push(("gc_samples", gc.samples.to_string()));
        pairs.push(("gc_step", format!("{:?}", gc.step)));
        let mut out = String::new();
        for (k, _) in KEY_DOCS {
            if let Some((_, v)) = pairs.iter().find(|(p, _)| p == k) {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn docs_cover_every_settable_key() {
        let mut c = RunConfig::new(Phase::Pretrain);
        for k in ModelConfig::KEYS.iter().chain(TrainConfig::KEYS) {
            assert!(KEY_DOCS.iter().any(|(d, _)| d == k), "{k} undocumented");
        }
        let text = c.to_text();
        c.apply_text(&text).unwrap();
        assert_eq!(c.to_text(), text);
        assert_eq!(text.lines().count(), KEY_DOCS.len());
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let mut c = RunConfig::new(Phase::Scratch);
        let e = c.apply_text("hidden = 32\nwidth = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 64);
        assert!(e.to_string().contains("line 2"));
        assert_eq!(c.model.encoder.hidden, 32);
    }

    #[test]
    fn switches_and_comments() {
        let mut c = RunConfig::new(Phase::Finetune);
        c.apply_text("# comment\nhistory_from_test = off\nreset_loc_emb=on # trailing\n")
            .unwrap();
        assert!(!c.train.window.history_from_test);
        assert!(c.train.reset_loc_emb);
    }
}
