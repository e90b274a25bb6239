use proptest::prelude::*;
use rand::Rng as _;
use stmoe_core::metrics::{accuracy, dtw, evaluate_pairs, geo_bleu, GeoBleuConfig, TrajPair};
use stmoe_core::mobility::GridCell;
use stmoe_core::rng;

fn cells(r: &mut rng::Rng, len: usize, side: u16) -> Vec<GridCell> {
    (0..len)
        .map(|_| GridCell::new(r.random_range(0..side), r.random_range(0..side)))
        .collect()
}

/// Minimum over every monotone warping path from (0,0) to the end,
/// accumulated in path order.
fn dtw_brute(a: &[GridCell], b: &[GridCell]) -> f64 {
    fn walk(a: &[GridCell], b: &[GridCell], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + a[i].distance(b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

#[test]
fn dtw_equals_exhaustive_paths() {
    let mut r = rng::seeded(11);
    for _ in 0..200 {
        let la = r.random_range(1..=6);
        let lb = r.random_range(1..=6);
        let a = cells(&mut r, la, 8);
        let b = cells(&mut r, lb, 8);
        assert_eq!(dtw(&a, &b).unwrap(), dtw_brute(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn accuracy_is_hamming_complement() {
    let mut r = rng::seeded(12);
    for _ in 0..1000 {
        let n = r.random_range(1..60);
        let a: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
        let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        let expected = 1.0 - hamming as f64 / n as f64;
        assert!((accuracy(&a, &b).unwrap() - expected).abs() < 1e-15);
    }
}

#[test]
fn geo_bleu_hand_cases() {
    let cfg = GeoBleuConfig::default();
    let t = [GridCell::new(1, 1), GridCell::new(2, 1), GridCell::new(2, 2), GridCell::new(5, 7)];
    assert!((geo_bleu(&t, &t, &cfg).unwrap() - 1.0).abs() < 1e-12);
    for (p, q) in [((0, 0), (0, 0)), ((0, 0), (3, 4)), ((2, 9), (2, 1)), ((0, 0), (1, 1))] {
        let d = ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
        let got = geo_bleu(&[GridCell::new(p.0, p.1)], &[GridCell::new(q.0, q.1)], &cfg).unwrap();
        assert!((got - (-0.5 * d).exp()).abs() < 1e-9, "{p:?} {q:?}");
    }
}

#[test]
fn evaluation_means_are_unweighted_over_windows() {
    let c = |x| GridCell::new(x, 0);
    let pairs = vec![
        TrajPair {
            uid: 1,
            day: 60,
            pred: vec![c(0), c(1), c(2), c(3)],
            truth: vec![c(0), c(1), c(2), c(3)],
        },
        TrajPair {
            uid: 2,
            day: 60,
            pred: vec![c(5)],
            truth: vec![c(0)],
        },
    ];
    let r = evaluate_pairs(&pairs, &GeoBleuConfig::default()).unwrap();
    assert_eq!(r.windows.len(), 2);
    assert!((r.accuracy - 0.5).abs() < 1e-15);
    assert!((r.dtw - 2.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn dtw_is_symmetric_and_zero_on_identity(seed in any::<u64>(), la in 1usize..12, lb in 1usize..12) {
        let mut r = rng::seeded(seed);
        let a = cells(&mut r, la, 40);
        let b = cells(&mut r, lb, 40);
        prop_assert_eq!(dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        prop_assert!(dtw(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn geo_bleu_is_bounded(seed in any::<u64>(), la in 1usize..20, lb in 1usize..20, side in 1u16..40) {
        let mut r = rng::seeded(seed);
        let a = cells(&mut r, la, side);
        let b = cells(&mut r, lb, side);
        let s = geo_bleu(&a, &b, &GeoBleuConfig::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s), "{}", s);
    }
}
