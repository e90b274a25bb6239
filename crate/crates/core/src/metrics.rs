//! Trajectory metrics: per-slot accuracy, dynamic time warping and
//! GEO-BLEU, plus per-window evaluation over a city.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mobility::{GridCell, SequenceExample};

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptySequence);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unnormalized dynamic time warping distance with Euclidean cell cost.
pub fn dtw(a: &[GridCell], b: &[GridCell]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ca in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = ca.distance(b[j - 1]) + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoBleuConfig {
    /// Largest n-gram order.
    pub max_n: usize,
    /// Distance decay of the n-gram similarity.
    pub beta: f64,
}

impl Default for GeoBleuConfig {
    fn default() -> Self {
        Self { max_n: 3, beta: 0.5 }
    }
}

impl GeoBleuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("geo-bleu beta must be positive, got {}", self.beta)));
        }
        if self.max_n == 0 {
            return Err(Error::Config("geo-bleu n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Spatially smoothed BLEU between a predicted and a reference trajectory.
///
/// For each order `n` up to `min(max_n, len)` every predicted n-gram is
/// greedily paired with an unused reference n-gram, highest similarity
/// first, where similarity is `exp(-beta · mean pointwise distance)`. The
/// order precision is the matched similarity mass divided by the larger of
/// the two n-gram counts. Precisions are combined by a uniformly weighted
/// geometric mean and multiplied by the usual brevity penalty.
pub fn geo_bleu(pred: &[GridCell], reference: &[GridCell], cfg: &GeoBleuConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.is_empty() || reference.is_empty() {
        return Err(Error::EmptySequence);
    }
    let orders = cfg.max_n.min(pred.len()).min(reference.len());
    let weight = 1.0 / orders as f64;
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let q = ngram_precision(pred, reference, n, cfg.beta);
        if q <= 0.0 {
            return Ok(0.0);
        }
        log_sum += weight * libm::log(q);
    }
    let bp = if pred.len() >= reference.len() {
        1.0
    } else {
        libm::exp(1.0 - reference.len() as f64 / pred.len() as f64)
    };
    Ok(bp * libm::exp(log_sum))
}

fn ngram_precision(pred: &[GridCell], reference: &[GridCell], n: usize, beta: f64) -> f64 {
    let np = pred.len() + 1 - n;
    let nr = reference.len() + 1 - n;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(np * nr);
    for i in 0..np {
        for j in 0..nr {
            let mean: f64 = (0..n).map(|k| pred[i + k].distance(reference[j + k])).sum::<f64>() / n as f64;
            pairs.push((libm::exp(-beta * mean), i, j));
        }
    }
    // Highest similarity first; ties by position so the matching is deterministic.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; np];
    let mut used_r = vec![false; nr];
    let mut matched = 0.0;
    let mut left = np.min(nr);
    for (s, i, j) in pairs {
        if left == 0 {
            break;
        }
        if used_p[i] || used_r[j] {
            continue;
        }
        used_p[i] = true;
        used_r[j] = true;
        matched += s;
        left -= 1;
    }
    matched / np.max(nr) as f64
}

/// Predicted and true cells at the observed slots of one forecast day.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajPair {
    pub uid: u32,
    pub day: u16,
    pub pred: Vec<GridCell>,
    pub truth: Vec<GridCell>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScore {
    pub uid: u32,
    pub day: u16,
    pub accuracy: f64,
    pub geo_bleu: f64,
    pub dtw: f64,
}

/// Per-window scores and their unweighted means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub windows: Vec<WindowScore>,
    pub accuracy: f64,
    pub geo_bleu: f64,
    pub dtw: f64,
}

pub fn score_pair(pair: &TrajPair, cfg: &GeoBleuConfig) -> Result<WindowScore> {
    Ok(WindowScore {
        uid: pair.uid,
        day: pair.day,
        accuracy: accuracy(&pair.pred, &pair.truth)?,
        geo_bleu: geo_bleu(&pair.pred, &pair.truth, cfg)?,
        dtw: dtw(&pair.pred, &pair.truth)?,
    })
}

/// Scores every window and averages each metric over windows.
pub fn evaluate_pairs(pairs: &[TrajPair], cfg: &GeoBleuConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let windows = pairs.iter().map(|p| score_pair(p, cfg)).collect::<Result<Vec<_>>>()?;
    let n = windows.len() as f64;
    let mean = |f: fn(&WindowScore) -> f64| windows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        accuracy: mean(|w| w.accuracy),
        geo_bleu: mean(|w| w.geo_bleu),
        dtw: mean(|w| w.dtw),
        windows,
    })
}

/// Anything that predicts one class per loss position of a forecast window.
pub trait Predictor {
    fn predict_window(&self, ex: &SequenceExample) -> Result<Vec<u32>>;
}

impl Predictor for crate::Model {
    fn predict_window(&self, ex: &SequenceExample) -> Result<Vec<u32>> {
        self.predict(ex)
    }
}

/// Runs `predictor` on forecast windows and converts predictions and
/// targets at observed slots into cell trajectories.
pub fn predict_pairs<P: Predictor + ?Sized>(
    predictor: &P,
    grid: crate::mobility::Grid,
    windows: &[SequenceExample],
) -> Result<Vec<TrajPair>> {
    let mut out = Vec::with_capacity(windows.len());
    for ex in windows {
        let pred = predictor.predict_window(ex)?;
        let truth = ex.loss_targets();
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch(pred.len(), truth.len()));
        }
        let to_cells = |ids: &mut dyn Iterator<Item = u32>| -> Result<Vec<GridCell>> {
            ids.map(|c| grid.class_to_cell(crate::mobility::LocationClass(c))).collect()
        };
        out.push(TrajPair {
            uid: ex.uid,
            day: ex.target_day.unwrap_or(0),
            pred: to_cells(&mut pred.iter().copied())?,
            truth: to_cells(&mut truth.iter().map(|&t| t as u32))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: u16, y: u16) -> GridCell {
        GridCell { x, y }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn dtw_examples() {
        let a = [c(0, 0), c(1, 0), c(2, 0)];
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&[c(0, 0)], &[c(3, 4)]).unwrap(), 5.0);
        // One extra repeated point costs nothing extra.
        assert_eq!(dtw(&a, &[c(0, 0), c(0, 0), c(1, 0), c(2, 0)]).unwrap(), 0.0);
        assert!(dtw(&[], &a).is_err());
    }

    #[test]
    fn geo_bleu_identity_and_unigram() {
        let cfg = GeoBleuConfig::default();
        let a = [c(3, 3), c(4, 3), c(4, 4), c(9, 1)];
        assert!((geo_bleu(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let v = geo_bleu(&[c(0, 0)], &[c(3, 4)], &cfg).unwrap();
        assert!((v - libm::exp(-2.5)).abs() < 1e-12);
        assert!(geo_bleu(&a, &a, &GeoBleuConfig { max_n: 3, beta: 0.0 }).is_err());
    }

    #[test]
    fn geo_bleu_brevity_penalty() {
        let cfg = GeoBleuConfig::default();
        let r = [c(1, 1), c(1, 1), c(1, 1), c(1, 1)];
        let v = geo_bleu(&r[..2], &r, &cfg).unwrap();
        // Two matched of three bigrams, two matched of four unigrams.
        let expected = libm::exp(1.0 - 2.0) * libm::sqrt(0.5 * (1.0 / 3.0));
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }
}
