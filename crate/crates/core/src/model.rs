//! The full predictor: spatial-temporal embedding → transformer encoder →
//! mixture-of-experts head over location classes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::embedding::{EmbeddingConfig, EmbeddingTables};
use crate::encoder::{prepend_cls, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mobility::{Grid, SequenceExample};
use crate::moe::{MoeConfig, MoeHead};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_side: usize,
    /// Longest sequence the model accepts (history + horizon).
    pub seq_len: usize,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    /// Prepends a CLS token that attends with the sequence (no loss target).
    pub use_cls: bool,
}

impl ModelConfig {
    /// Full-scale configuration (200×200 grid, 12×768 encoder, 8 experts).
    pub fn paper() -> Self {
        Self {
            grid_side: 200,
            seq_len: 240,
            embedding: EmbeddingConfig::PAPER,
            encoder: EncoderConfig::PAPER,
            moe: MoeConfig {
                experts: 8,
                top_k: 2,
                expert_ffn: 3072,
                residual: true,
                aux_weight: 0.0,
            },
            use_cls: false,
        }
    }

    /// Desk-scale configuration: 40×40 grid, 2×64 encoder, 4 experts, every
    /// embedding width divided by 8.
    pub fn desk() -> Self {
        Self {
            grid_side: 40,
            seq_len: 240,
            embedding: EmbeddingConfig::scaled(8),
            encoder: EncoderConfig::DESK,
            moe: MoeConfig {
                experts: 4,
                top_k: 2,
                expert_ffn: 256,
                residual: true,
                aux_weight: 0.0,
            },
            use_cls: false,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid_side)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.encoder.validate()?;
        self.moe.validate()?;
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.embedding;
        let n = &self.encoder;
        let m = &self.moe;
        alloc::vec![
            ("grid", self.grid_side.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("emb_day", e.day.to_string()),
            ("emb_time", e.time.to_string()),
            ("emb_dow", e.day_of_week.to_string()),
            ("emb_weekend", e.weekend.to_string()),
            ("emb_loc", e.location.to_string()),
            ("pos_emb", e.positional.to_string()),
            ("layers", n.layers.to_string()),
            ("hidden", n.hidden.to_string()),
            ("heads", n.heads.to_string()),
            ("ffn", n.ffn.to_string()),
            ("dropout", format!("{:?}", n.dropout)),
            ("post_norm", n.post_norm.to_string()),
            ("experts", m.experts.to_string()),
            ("top_k", m.top_k.to_string()),
            ("expert_ffn", m.expert_ffn.to_string()),
            ("moe_residual", m.residual.to_string()),
            ("moe_aux_weight", format!("{:?}", m.aux_weight)),
            ("use_cls", self.use_cls.to_string()),
        ]
    }

    /// Keys understood by [`ModelConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "grid",
        "seq_len",
        "emb_day",
        "emb_time",
        "emb_dow",
        "emb_weekend",
        "emb_loc",
        "pos_emb",
        "layers",
        "hidden",
        "heads",
        "ffn",
        "dropout",
        "post_norm",
        "experts",
        "top_k",
        "expert_ffn",
        "moe_residual",
        "moe_aux_weight",
        "use_cls",
    ];

    /// Sets one key; returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let e = &mut self.embedding;
        let n = &mut self.encoder;
        let m = &mut self.moe;
        match key {
            "grid" => self.grid_side = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "emb_day" => e.day = parse(key, value)?,
            "emb_time" => e.time = parse(key, value)?,
            "emb_dow" => e.day_of_week = parse(key, value)?,
            "emb_weekend" => e.weekend = parse(key, value)?,
            "emb_loc" => e.location = parse(key, value)?,
            "pos_emb" => e.positional = parse(key, value)?,
            "layers" => n.layers = parse(key, value)?,
            "hidden" => n.hidden = parse(key, value)?,
            "heads" => n.heads = parse(key, value)?,
            "ffn" => n.ffn = parse(key, value)?,
            "dropout" => n.dropout = parse(key, value)?,
            "post_norm" => n.post_norm = parse(key, value)?,
            "experts" => m.experts = parse(key, value)?,
            "top_k" => m.top_k = parse(key, value)?,
            "expert_ffn" => m.expert_ffn = parse(key, value)?,
            "moe_residual" => m.residual = parse(key, value)?,
            "moe_aux_weight" => m.aux_weight = parse(key, value)?,
            "use_cls" => self.use_cls = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Dimensions that must agree for parameters to be reusable; dropout and
    /// the auxiliary weight may differ.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let skip = ["dropout", "moe_aux_weight"];
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|((k, a), (_, b))| !skip.contains(k) && a != b)
            .map(|((k, a), (_, b))| format!("{k}: {a} vs {b}"))
            .collect()
    }
}

pub(crate) fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Output of one forward pass over selected positions.
pub struct Forward {
    /// `[rows×G²]` logits for the requested positions.
    pub logits: Var,
    pub gate_probs: Var,
    pub aux_loss: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub grid: Grid,
    pub params: ParamStore,
    pub embedding: EmbeddingTables,
    pub encoder: Encoder,
    pub head: MoeHead,
}

impl Model {
    /// Builds and initializes every parameter from one seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let h = config.encoder.hidden;
        let max_len = config.seq_len + usize::from(config.use_cls);
        let embedding = EmbeddingTables::init(config.embedding, grid, h, max_len, &mut params, &mut rng)?;
        let encoder = Encoder::init(config.encoder, &mut params, &mut rng)?;
        let head = MoeHead::init(config.moe, h, grid.num_cells(), &mut params, &mut rng)?;
        Ok(Self {
            config,
            grid,
            params,
            embedding,
            encoder,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn location_table(&self) -> ParamId {
        self.embedding.location
    }

    /// Runs the encoder over `ex` and returns its `[T×H]` output (the CLS row,
    /// if enabled, is dropped).
    pub fn hidden(&self, g: &mut Graph, ex: &SequenceExample) -> Result<Var> {
        if ex.len() > self.config.seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} exceeds seq_len {}",
                ex.len(),
                self.config.seq_len
            )));
        }
        let x = self.embedding.embed_sequence(g, &self.params, ex)?;
        let x = g.dropout(x, self.config.encoder.dropout);
        if self.config.use_cls {
            let cls = self.embedding.embed_cls(g, &self.params)?;
            let (x, mask) = prepend_cls(g, x, cls, &ex.attn_mask)?;
            let h = self.encoder.encode(g, &self.params, x, &mask)?;
            let rows: Vec<usize> = (1..=ex.len()).collect();
            g.gather_rows(h, &rows)
        } else {
            self.encoder.encode(g, &self.params, x, &ex.attn_mask)
        }
    }

    /// Logits at the given positions of `ex`.
    pub fn forward(&self, g: &mut Graph, ex: &SequenceExample, positions: &[usize]) -> Result<Forward> {
        let h = self.hidden(g, ex)?;
        let rows = g.gather_rows(h, positions)?;
        let out = self.head.predict_logits(g, &self.params, rows)?;
        Ok(Forward {
            logits: out.logits,
            gate_probs: out.gate_probs,
            aux_loss: out.aux_loss,
        })
    }

    /// Eval-mode logits for every position, `[T×G²]`.
    pub fn predict_logits(&self, ex: &SequenceExample) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let h = self.hidden(&mut g, ex)?;
        let out = self.head.predict_logits(&mut g, &self.params, h)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode argmax class at every loss position of `ex`.
    pub fn predict(&self, ex: &SequenceExample) -> Result<Vec<u32>> {
        let positions = ex.loss_positions();
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::no_grad();
        let f = self.forward(&mut g, ex, &positions)?;
        let logits = g.value(f.logits);
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r)) as u32).collect())
    }

    /// Clears gradient on frozen entries (the PAD location row).
    pub fn mask_frozen_grads(&mut self) {
        self.embedding.zero_pad_grad(&mut self.params);
    }

    /// Restores frozen values after an update.
    pub fn restore_frozen(&mut self) {
        self.embedding.zero_pad_row(&mut self.params);
    }

    /// Overwrites the location table with a fresh N(0, 0.02²) draw.
    pub fn reset_location_embeddings(&mut self, seed: u64) {
        let mut fresh = ParamStore::new();
        let shape = self.params.get(self.embedding.location).shape().to_vec();
        let id = fresh.add_normal("embed.loc", &shape, crate::embedding::INIT_STD, &mut rng::seeded(seed));
        let data = fresh.get(id).data().to_vec();
        self.params
            .get_mut(self.embedding.location)
            .data_mut()
            .copy_from_slice(&data);
        self.restore_frozen();
    }

    /// Copies parameters from named arrays; every model parameter must be
    /// present with its exact shape.
    pub fn load_named<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>) -> Result<()> {
        let mut seen = alloc::vec![false; self.params.len()];
        for (name, shape, data) in tensors {
            if let Some(id) = self.params.find(name) {
                self.params.set_values(name, shape, data)?;
                seen[id.index()] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Architecture(format!(
                "parameter {} missing",
                self.params.name(self.params.ids().nth(missing).expect("in range"))
            )));
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.dropout = 0.125;
        cfg.use_cls = true;
        let mut back = ModelConfig::paper();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert_eq!(ModelConfig::KEYS.len(), cfg.to_pairs().len());
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("layers", "x").is_err());
    }

    #[test]
    fn architecture_diff_ignores_dropout() {
        let a = ModelConfig::desk();
        let mut b = a;
        b.encoder.dropout = 0.0;
        assert!(a.architecture_diff(&b).is_empty());
        b.encoder.hidden = 32;
        assert_eq!(a.architecture_diff(&b), ["hidden: 64 vs 32"]);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
