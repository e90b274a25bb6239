//! Central finite-difference check of every parameter gradient of the full
//! model on a short synthetic window.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mobility::{Calendar, Grid, SequenceExample};
use crate::model::{Model, ModelConfig};
use crate::rng;

/// Denominator floor of the relative error, so entries whose true gradient
/// is essentially zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub grid_side: usize,
    /// Hidden sizes swept; each must be divisible by `heads`.
    pub hidden: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    /// Expert counts swept; each runs dense (`top_k = experts`).
    pub experts: Vec<usize>,
    pub seq_len: usize,
    /// Entries checked per parameter tensor.
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            grid_side: 40,
            hidden: vec![8, 16, 32, 64],
            layers: 2,
            heads: 4,
            experts: vec![2, 8],
            seq_len: 16,
            samples: 4,
            step: 1e-4,
            seed: 0,
        }
    }
}

/// Worst relative error over the checked entries of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub hidden: usize,
    pub experts: usize,
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Model configuration used for one sweep point: desk embeddings, dense
/// routing and no dropout so the loss is a smooth function of parameters.
pub fn sweep_config(cfg: &GradcheckConfig, hidden: usize, experts: usize) -> ModelConfig {
    let mut m = ModelConfig::desk();
    m.grid_side = cfg.grid_side;
    m.seq_len = cfg.seq_len;
    m.encoder.layers = cfg.layers;
    m.encoder.hidden = hidden;
    m.encoder.heads = cfg.heads;
    m.encoder.ffn = 4 * hidden;
    m.encoder.dropout = 0.0;
    m.moe.experts = experts;
    m.moe.top_k = experts;
    m.moe.expert_ffn = 4 * hidden;
    m
}

/// A window with left padding, observed history and a masked tail whose
/// targets drive the loss.
pub fn probe_example(grid: Grid, len: usize, seed: u64) -> SequenceExample {
    let mut r = rng::derived(seed, &[0x6772_6164]);
    let pad = len / 8;
    let masked = (len / 4).max(1);
    let cal = Calendar::default();
    let mut ex = SequenceExample {
        uid: 0,
        target_day: None,
        tokens: Vec::with_capacity(len),
        day: Vec::with_capacity(len),
        slot: Vec::with_capacity(len),
        day_of_week: Vec::with_capacity(len),
        weekend: Vec::with_capacity(len),
        attn_mask: Vec::with_capacity(len),
        loss_mask: Vec::with_capacity(len),
        targets: Vec::with_capacity(len),
    };
    for i in 0..len {
        let day: u16 = r.random_range(0..crate::mobility::NUM_DAYS as u16);
        let class = r.random_range(0..grid.num_cells() as u32);
        let (token, attn, loss, target) = if i < pad {
            (grid.pad().0, false, false, None)
        } else if i >= len - masked {
            (grid.mask().0, true, true, Some(class))
        } else {
            (class, true, false, None)
        };
        ex.tokens.push(token);
        ex.day.push(day);
        ex.slot.push(r.random_range(0..crate::mobility::SLOTS_PER_DAY as u8));
        ex.day_of_week.push(cal.day_of_week(day));
        ex.weekend.push(u8::from(cal.is_weekend(day)));
        ex.attn_mask.push(attn);
        ex.loss_mask.push(loss);
        ex.targets.push(target);
    }
    ex
}

fn loss_value(model: &Model, ex: &SequenceExample, positions: &[usize], targets: &[usize]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let f = model.forward(&mut g, ex, positions)?;
    let keep = vec![true; targets.len()];
    let loss = g.cross_entropy(f.logits, targets, &keep)?;
    Ok(g.value(loss).item())
}

/// Fourth-order central difference
/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h` of one parameter entry.
pub fn central_difference<F>(model: &mut Model, id: crate::params::ParamId, index: usize, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Model) -> Result<f64>,
{
    let orig = model.params.get(id).data()[index];
    let mut at = |model: &mut Model, dx: f64| -> Result<f64> {
        model.params.get_mut(id).data_mut()[index] = orig + dx;
        let v = f(model);
        model.params.get_mut(id).data_mut()[index] = orig;
        v
    };
    let p1 = at(model, step)?;
    let m1 = at(model, -step)?;
    let p2 = at(model, 2.0 * step)?;
    let m2 = at(model, -2.0 * step)?;
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step))
}

/// Checks `samples` entries of every parameter tensor of `model` on `ex`:
/// the largest-gradient entry plus random entries with a nonzero gradient.
pub fn check_model(model: &mut Model, ex: &SequenceExample, samples: usize, step: f64, seed: u64) -> Result<Vec<(String, usize, f64)>> {
    let positions = ex.loss_positions();
    let targets = ex.loss_targets();
    model.params.zero_grads();
    {
        let mut g = Graph::new();
        let f = model.forward(&mut g, ex, &positions)?;
        let keep = vec![true; targets.len()];
        let loss = g.cross_entropy(f.logits, &targets, &keep)?;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.params);
    }
    let mut r = rng::derived(seed, &[0x7361_6d70]);
    let mut out = Vec::new();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let grad: Vec<f64> = model.params.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
        let mut picks = Vec::new();
        if let Some(&top) = nonzero.iter().max_by(|&&a, &&b| grad[a].abs().total_cmp(&grad[b].abs())) {
            picks.push(top);
        }
        let pool: &[usize] = if nonzero.is_empty() { &[] } else { &nonzero };
        while picks.len() < samples.min(pool.len()) {
            let i = pool[r.random_range(0..pool.len())];
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        if picks.is_empty() && !grad.is_empty() {
            // No dependency on this tensor in this window: a random entry must
            // also show a zero numeric gradient.
            picks.push(r.random_range(0..grad.len()));
        }
        let mut worst = 0.0f64;
        for &i in &picks {
            let numeric = central_difference(model, id, i, step, |m| loss_value(m, ex, &positions, &targets))?;
            let e = relative_error(grad[i], numeric);
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck of {}", model.params.name(id))));
            }
            worst = worst.max(e);
        }
        out.push((String::from(model.params.name(id)), picks.len(), worst));
    }
    Ok(out)
}

/// Runs the full hidden-size × expert-count sweep.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.hidden.is_empty() || cfg.experts.is_empty() || cfg.samples == 0 {
        return Err(Error::Config("gradcheck sweep is empty".into()));
    }
    let mut tensors = Vec::new();
    let mut max_rel_err = 0.0f64;
    for &h in &cfg.hidden {
        for &k in &cfg.experts {
            let mc = sweep_config(cfg, h, k);
            mc.validate()?;
            let seed = rng::derive_seed(cfg.seed, &[h as u64, k as u64]);
            let mut model = Model::new(mc, seed)?;
            let ex = probe_example(model.grid, cfg.seq_len, seed);
            for (name, checked, err) in check_model(&mut model, &ex, cfg.samples, cfg.step, seed)? {
                max_rel_err = max_rel_err.max(err);
                tensors.push(TensorCheck {
                    hidden: h,
                    experts: k,
                    name,
                    checked,
                    max_rel_err: err,
                });
            }
        }
    }
    Ok(GradcheckReport { tensors, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_sweep_passes() {
        let cfg = GradcheckConfig {
            grid_side: 6,
            hidden: vec![8],
            experts: vec![2],
            seq_len: 10,
            samples: 3,
            ..GradcheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.tensors.iter().any(|t| t.name == "moe.gate.w"));
    }
}
