//! Bidirectional transformer encoder.

use alloc::format;
use alloc::vec::Vec;

use crate::embedding::INIT_STD;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// FFN inner width (4·hidden by default).
    pub ffn: usize,
    pub dropout: f64,
    /// Original BERT ordering (norm after the residual add) instead of pre-norm.
    pub post_norm: bool,
}

impl EncoderConfig {
    pub const PAPER: EncoderConfig = EncoderConfig {
        layers: 12,
        hidden: 768,
        heads: 16,
        ffn: 3072,
        dropout: 0.1,
        post_norm: false,
    };

    pub const DESK: EncoderConfig = EncoderConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        ffn: 256,
        dropout: 0.1,
        post_norm: false,
    };

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn == 0 {
            return Err(Error::Config("ffn width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `x·W + b` parameters with `W` stored `[in×out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(name: &str, fan_in: usize, fan_out: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let w = store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(name: &str, width: usize, store: &mut ParamStore) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn init(name: &str, width: usize, inner: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::init(&format!("{name}.fc1"), width, inner, store, rng),
            outer: Linear::init(&format!("{name}.fc2"), inner, width, store, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn init(name: &str, hidden: usize, heads: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self {
            query: Linear::init(&format!("{name}.q"), hidden, hidden, store, rng),
            key: Linear::init(&format!("{name}.k"), hidden, hidden, store, rng),
            value: Linear::init(&format!("{name}.v"), hidden, hidden, store, rng),
            output: Linear::init(&format!("{name}.o"), hidden, hidden, store, rng),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (whose saved
    /// weights can be read with [`Graph::attention_probs`]).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, attn_mask: &[bool]) -> Result<(Var, Var)> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.attention(q, k, v, self.heads, attn_mask)?;
        Ok((self.output.forward(g, store, a)?, a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    /// Final norm of the pre-norm stack; absent for post-norm.
    pub final_norm: Option<LayerNorm>,
}

impl Encoder {
    pub fn init(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|i| EncoderLayer {
                attention: SelfAttention::init(&format!("enc.{i}.attn"), h, config.heads, store, rng),
                norm1: LayerNorm::init(&format!("enc.{i}.ln1"), h, store),
                ffn: FeedForward::init(&format!("enc.{i}.ffn"), h, config.ffn, store, rng),
                norm2: LayerNorm::init(&format!("enc.{i}.ln2"), h, store),
            })
            .collect();
        let final_norm = (!config.post_norm).then(|| LayerNorm::init("enc.final_ln", h, store));
        Ok(Self {
            config,
            layers,
            final_norm,
        })
    }

    /// Runs the layer stack over `[T×H]` embeddings. Dropout is applied only
    /// when the graph is in train mode.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, attn_mask: &[bool]) -> Result<Var> {
        let p = self.config.dropout;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if self.config.post_norm {
                let (a, _) = layer.attention.forward(g, store, h, attn_mask)?;
                let a = g.dropout(a, p);
                let sum = g.add(h, a)?;
                h = layer.norm1.forward(g, store, sum)?;
                let f = layer.ffn.forward(g, store, h)?;
                let f = g.dropout(f, p);
                let sum = g.add(h, f)?;
                h = layer.norm2.forward(g, store, sum)?;
            } else {
                let n = layer.norm1.forward(g, store, h)?;
                let (a, _) = layer.attention.forward(g, store, n, attn_mask)?;
                let a = g.dropout(a, p);
                h = g.add(h, a)?;
                let n = layer.norm2.forward(g, store, h)?;
                let f = layer.ffn.forward(g, store, n)?;
                let f = g.dropout(f, p);
                h = g.add(h, f)?;
            }
            g.check_finite(h, &format!("encoder block {i}"))?;
        }
        match &self.final_norm {
            Some(norm) => norm.forward(g, store, h),
            None => Ok(h),
        }
    }
}

/// Prepends a CLS row to `[T×H]` embeddings; the mask grows by one attended
/// position at index 0 and every input row moves to `i + 1`.
pub fn prepend_cls(g: &mut Graph, embedded: Var, cls_row: Var, attn_mask: &[bool]) -> Result<(Var, Vec<bool>)> {
    let t = g.value(embedded).rows();
    let shifted: Vec<usize> = (1..=t).collect();
    let body = g.scatter_rows(embedded, &shifted, t + 1)?;
    let head = g.scatter_rows(cls_row, &[0], t + 1)?;
    let x = g.add(body, head)?;
    let mut mask = Vec::with_capacity(t + 1);
    mask.push(true);
    mask.extend_from_slice(attn_mask);
    Ok((x, mask))
}
