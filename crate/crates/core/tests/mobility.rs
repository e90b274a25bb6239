use std::collections::BTreeMap;

use proptest::prelude::*;
use stmoe_core::baselines::{DayType, FrequencyTable};
use stmoe_core::mobility::{
    build_forecast_windows, build_mlm_windows, group_by_user, synthesize_city, Calendar, Grid, GridCell,
    LocationClass, Split, SynthParams, WindowConfig, SLOTS_PER_DAY,
};
use stmoe_core::rng;

proptest! {
    #[test]
    fn cell_class_bijection(side in 1usize..200, x in 0u16..200, y in 0u16..200) {
        let grid = Grid::new(side).unwrap();
        let cell = GridCell::new(x, y);
        match grid.cell_to_class(cell) {
            Ok(class) => {
                prop_assert!(grid.contains(cell));
                prop_assert!((class.0 as usize) < grid.num_cells());
                prop_assert_eq!(class.0 as usize, x as usize * side + y as usize);
                prop_assert_eq!(grid.class_to_cell(class).unwrap(), cell);
            }
            Err(_) => prop_assert!(!grid.contains(cell)),
        }
    }
}

#[test]
fn special_tokens_follow_the_cells() {
    let grid = Grid::new(40).unwrap();
    assert_eq!((grid.pad().0, grid.mask().0, grid.cls().0), (1600, 1601, 1602));
    for special in [grid.pad(), grid.mask(), grid.cls()] {
        assert!(grid.class_to_cell(special).is_err());
    }
    assert!(grid.class_to_cell(LocationClass(1599)).is_ok());
}

#[test]
fn generated_windows_satisfy_every_invariant() {
    let grid = Grid::new(40).unwrap();
    let users = group_by_user(synthesize_city(6, grid, 13, &SynthParams::default()).unwrap());
    let cfg = WindowConfig::default();
    let mut r = rng::seeded(1);
    for u in &users {
        for split in [Split::Train, Split::Test] {
            for ex in build_forecast_windows(u, split, grid, &cfg).unwrap() {
                ex.validate(grid, cfg.calendar).unwrap();
                assert_eq!(ex.len(), cfg.seq_len());
                let day = ex.target_day.unwrap();
                assert!(ex.loss_positions().iter().all(|&i| ex.day[i] == day));
                // History never reaches the forecast day.
                let hist = cfg.seq_len() - cfg.horizon;
                assert!(ex.day[..hist].iter().zip(&ex.attn_mask).all(|(&d, &a)| !a || d < day));
                if split == Split::Train {
                    assert!(ex.day.iter().zip(&ex.attn_mask).all(|(&d, &a)| !a || d < 60));
                }
            }
        }
        for ex in build_mlm_windows(u, 0..54, grid, &cfg, &mut r).unwrap() {
            ex.validate(grid, cfg.calendar).unwrap();
            let real = ex.attn_mask.iter().filter(|&&a| a).count();
            let masked = ex.loss_positions().len();
            assert_eq!(masked, ((real as f64 * 0.15).floor() as usize).max(1));
        }
    }
}

#[test]
fn excursions_stay_within_radius_of_the_schedule() {
    let grid = Grid::new(40).unwrap();
    let clean = SynthParams {
        epsilon: 0.0,
        ..SynthParams::default()
    };
    let noisy = SynthParams {
        epsilon: 1.0,
        ..SynthParams::default()
    };
    let a = synthesize_city(5, grid, 17, &clean).unwrap();
    let b = synthesize_city(5, grid, 17, &noisy).unwrap();
    assert_eq!(a.len(), b.len());
    let mut moved = 0;
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.uid, x.day, x.slot), (y.uid, y.day, y.slot));
        let dx = (x.cell.x as i32 - y.cell.x as i32).abs();
        let dy = (x.cell.y as i32 - y.cell.y as i32).abs();
        assert!(dx.max(dy) <= 3);
        moved += usize::from(x.cell != y.cell);
    }
    assert!(moved * 2 > a.len());
}

#[test]
fn frequency_table_agrees_with_a_direct_tally() {
    let grid = Grid::new(12).unwrap();
    let params = SynthParams {
        epsilon: 0.3,
        ..SynthParams::default()
    };
    let users = group_by_user(synthesize_city(5, grid, 19, &params).unwrap());
    let cal = Calendar::default();
    let table = FrequencyTable::fit(&users, grid, cal, DayType::DayOfWeek, 60).unwrap();
    for u in &users {
        let mut tally: BTreeMap<(u8, u8), BTreeMap<u32, u32>> = BTreeMap::new();
        for r in u.records.iter().filter(|r| r.day < 60) {
            let class = grid.cell_to_class(r.cell).unwrap().0;
            *tally
                .entry((cal.day_of_week(r.day), r.slot))
                .or_default()
                .entry(class)
                .or_default() += 1;
        }
        for ((dow, slot), counts) in &tally {
            let best = counts.values().max().unwrap();
            let mode = counts.iter().find(|(_, c)| *c == best).map(|(k, _)| *k).unwrap();
            assert_eq!(table.predict(u.uid, *dow, *slot), mode, "uid {} key {dow},{slot}", u.uid);
        }
    }
}

#[test]
fn frequency_baseline_is_exact_on_a_noiseless_city() {
    use stmoe_core::metrics::{evaluate_pairs, predict_pairs, GeoBleuConfig};
    let grid = Grid::new(40).unwrap();
    // Every (weekday, slot) key must be seen in training; with sparse
    // recording an unseen key falls back to a coarser bucket.
    let params = SynthParams {
        epsilon: 0.0,
        presence_day: 1.0,
        presence_night: 1.0,
        weekend_presence: 1.0,
        ..SynthParams::default()
    };
    let users = group_by_user(synthesize_city(8, grid, 23, &params).unwrap());
    let cfg = WindowConfig::default();
    let table = FrequencyTable::fit(&users, grid, cfg.calendar, DayType::DayOfWeek, 60).unwrap();
    let mut windows = Vec::new();
    for u in &users {
        windows.extend(build_forecast_windows(u, Split::Test, grid, &cfg).unwrap());
    }
    assert!(windows.len() > 8 * 10);
    assert!(windows.iter().all(|w| w.loss_positions().len() <= SLOTS_PER_DAY));
    let r = evaluate_pairs(&predict_pairs(&table, grid, &windows).unwrap(), &GeoBleuConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.dtw, 0.0);
}
