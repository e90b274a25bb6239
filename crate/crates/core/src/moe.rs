//! Mixture-of-experts classification head.
//!
//! For each position `x` the gate computes `g = softmax(W x + b)` over `K`
//! experts, keeps the `top_k` largest probabilities (ties to the lower
//! expert index), renormalizes them and mixes the kept expert outputs:
//! `MoE(x) = Σ_kept ĝ_k f_k(x)`. With `top_k == K` this is exactly the dense
//! mixture `Σ_k g_k f_k(x)`. The mixture (optionally added back to `x`) goes
//! through a final linear layer over the `G²` location classes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::embedding::INIT_STD;
use crate::encoder::{FeedForward, Linear};
use crate::error::{Error, Result};
use crate::graph::{top_k_indices, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    /// Inner width of every expert FFN.
    pub expert_ffn: usize,
    /// Adds the head input back onto the mixture before the output layer.
    pub residual: bool,
    /// Weight of the importance-balancing term (0 disables it).
    pub aux_weight: f64,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={} experts",
                self.top_k, self.experts
            )));
        }
        if self.expert_ffn == 0 {
            return Err(Error::Config("expert ffn width must be positive".into()));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Config("moe_aux_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gate parameters: rows `w_k` of a `[K×H]` matrix and biases `b_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeHead {
    pub config: MoeConfig,
    pub hidden: usize,
    pub gate: Gate,
    pub experts: Vec<FeedForward>,
    pub output: Linear,
}

/// Result of running the head over a set of rows.
pub struct HeadOutput {
    pub logits: Var,
    /// Dense gate probabilities `[rows×K]` before truncation.
    pub gate_probs: Var,
    /// Importance-balancing penalty, when enabled.
    pub aux_loss: Option<Var>,
}

impl MoeHead {
    pub fn init(config: MoeConfig, hidden: usize, classes: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let gate = Gate {
            w: store.add_normal("moe.gate.w", &[config.experts, hidden], INIT_STD, rng),
            b: store.add("moe.gate.b", Tensor::zeros(&[config.experts])),
        };
        let experts = (0..config.experts)
            .map(|k| FeedForward::init(&format!("moe.expert.{k}"), hidden, config.expert_ffn, store, rng))
            .collect();
        let output = Linear::init("head.out", hidden, classes, store, rng);
        Ok(Self {
            config,
            hidden,
            gate,
            experts,
            output,
        })
    }

    /// `softmax(x Wᵀ + b)` for every row of `x [n×H]` → `[n×K]`.
    pub fn gate_probs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.gate.w);
        let b = g.param(store, self.gate.b);
        let logits = g.matmul_bt(x, w)?;
        let logits = g.add_bias(logits, b)?;
        Ok(g.softmax(logits))
    }

    /// Sparse top-k mixture over the rows of `x [n×H]`; returns the mixture
    /// `[n×H]` and the dense gate probabilities.
    pub fn moe_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let n = g.value(x).rows();
        let probs = self.gate_probs(g, store, x)?;
        let weights = g.top_k_renorm(probs, self.config.top_k)?;
        let k = self.config.experts;
        // Rows routed to each expert, ascending. Routing follows the kept set
        // rather than nonzero weights, which could underflow.
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); k];
        if self.config.top_k == k {
            routed = vec![(0..n).collect(); k];
        } else {
            for (r, row) in g.value(probs).data().chunks_exact(k).enumerate() {
                for e in top_k_indices(row, self.config.top_k) {
                    routed[e].push(r);
                }
            }
        }
        let mut out: Option<Var> = None;
        // Fixed expert-ascending accumulation order keeps the sum reproducible.
        for (e, rows) in routed.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, rows)?;
            let fe = self.experts[e].forward(g, store, xe)?;
            let we = g.pick_column(weights, rows, e)?;
            let ye = g.mul_rows(fe, we)?;
            let placed = g.scatter_rows(ye, rows, n)?;
            out = Some(match out {
                Some(acc) => g.add(acc, placed)?,
                None => placed,
            });
        }
        let out = out.ok_or_else(|| Error::Shape("moe over zero rows".into()))?;
        Ok((out, probs))
    }

    /// Location logits `[n×classes]` for the rows of `hidden`.
    pub fn predict_logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<HeadOutput> {
        let (mix, gate_probs) = self.moe_forward(g, store, hidden)?;
        let h = if self.config.residual {
            g.add(hidden, mix)?
        } else {
            mix
        };
        let logits = self.output.forward(g, store, h)?;
        let aux_loss = if self.config.aux_weight > 0.0 {
            let importance = g.sum_rows(gate_probs);
            let cv = g.cv_squared(importance);
            Some(g.scale(cv, self.config.aux_weight))
        } else {
            None
        };
        Ok(HeadOutput {
            logits,
            gate_probs,
            aux_loss,
        })
    }
}

/// Top-1 assignment counts per expert for row-major `[n×K]` gate
/// probabilities. Ties go to the lowest expert index.
pub fn expert_load(gate_probs: &[f64], experts: usize) -> Vec<usize> {
    let mut counts = vec![0; experts];
    for row in gate_probs.chunks_exact(experts) {
        counts[top_k_indices(row, 1)[0]] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn head(experts: usize, top_k: usize, hidden: usize) -> (ParamStore, MoeHead) {
        let mut store = ParamStore::new();
        let cfg = MoeConfig {
            experts,
            top_k,
            expert_ffn: 2 * hidden,
            residual: true,
            aux_weight: 0.0,
        };
        let h = MoeHead::init(cfg, hidden, 5, &mut store, &mut rng::seeded(4)).unwrap();
        (store, h)
    }

    #[test]
    fn zero_gate_is_uniform_and_single_expert_is_one() {
        let (mut store, h) = head(4, 2, 3);
        store.get_mut(h.gate.w).data_mut().fill(0.0);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_rows(&[&[0.3, -2.0, 1.0]]).unwrap());
        let p = h.gate_probs(&mut g, &store, x).unwrap();
        assert_eq!(g.value(p).data(), &[0.25; 4]);

        let (store, h) = head(1, 1, 3);
        let p = h.gate_probs(&mut g, &store, x).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
    }

    #[test]
    fn equal_gates_average_two_experts() {
        let (mut store, h) = head(2, 2, 3);
        store.get_mut(h.gate.w).data_mut().fill(0.0);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_rows(&[&[0.3, -2.0, 1.0]]).unwrap());
        let (mix, _) = h.moe_forward(&mut g, &store, x).unwrap();
        let f0 = h.experts[0].forward(&mut g, &store, x).unwrap();
        let f1 = h.experts[1].forward(&mut g, &store, x).unwrap();
        for i in 0..3 {
            let want = 0.5 * g.value(f0).data()[i] + 0.5 * g.value(f1).data()[i];
            assert!((g.value(mix).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn expert_load_examples() {
        assert_eq!(expert_load(&[0.1, 0.7, 0.2], 3), [0, 1, 0]);
        assert_eq!(expert_load(&[0.25; 8], 4), [2, 0, 0, 0]);
    }

    #[test]
    fn invalid_top_k_rejected() {
        let cfg = MoeConfig {
            experts: 2,
            top_k: 3,
            expert_ffn: 4,
            residual: true,
            aux_weight: 0.0,
        };
        assert!(cfg.validate().is_err());
    }
}
