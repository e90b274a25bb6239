use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::index;

use super::{Calendar, Grid, Record, SequenceExample, UserTrajectory, NUM_DAYS, SLOTS_PER_DAY, TEST_START};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sequence construction parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    /// Observed records preceding the forecast day (192).
    pub history_len: usize,
    /// Slots predicted jointly (48, one day).
    pub horizon: usize,
    /// Forecast days with fewer observed slots are dropped.
    pub min_observed: usize,
    /// Whether test-period days before the forecast day may enter the history.
    pub history_from_test: bool,
    pub test_start: u16,
    pub calendar: Calendar,
    pub mask_ratio: f64,
    pub mlm_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            history_len: 192,
            horizon: SLOTS_PER_DAY,
            min_observed: 1,
            history_from_test: true,
            test_start: TEST_START,
            calendar: Calendar::default(),
            mask_ratio: 0.15,
            mlm_stride: 48,
        }
    }
}

impl WindowConfig {
    pub fn seq_len(&self) -> usize {
        self.history_len + self.horizon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Partitions records into training days `[0, test_start)` and test days.
pub fn split_train_test(records: &[Record], test_start: u16) -> (Vec<Record>, Vec<Record>) {
    records.iter().partition(|r| r.day < test_start)
}

struct Builder {
    ex: SequenceExample,
}

impl Builder {
    fn new(uid: u32, len: usize, grid: Grid, target_day: Option<u16>) -> Self {
        Self {
            ex: SequenceExample {
                uid,
                target_day,
                tokens: vec![grid.pad().0; len],
                day: vec![0; len],
                slot: vec![0; len],
                day_of_week: vec![0; len],
                weekend: vec![0; len],
                attn_mask: vec![false; len],
                loss_mask: vec![false; len],
                targets: vec![None; len],
            },
        }
    }

    fn set(&mut self, i: usize, token: u32, day: u16, slot: u8, calendar: Calendar) {
        let ex = &mut self.ex;
        ex.tokens[i] = token;
        ex.day[i] = day;
        ex.slot[i] = slot;
        ex.day_of_week[i] = calendar.day_of_week(day);
        ex.weekend[i] = u8::from(calendar.is_weekend(day));
        ex.attn_mask[i] = true;
    }

    /// Places records right-aligned so that the last one lands at `end - 1`.
    fn history(&mut self, records: &[Record], end: usize, grid: Grid, calendar: Calendar) -> Result<()> {
        let start = end - records.len();
        for (i, r) in records.iter().enumerate() {
            let token = grid.cell_to_class(r.cell)?.0;
            self.set(start + i, token, r.day, r.slot, calendar);
        }
        Ok(())
    }
}

/// Builds the forecast window for `day`: the most recent `history_len`
/// observed records before `day` (left-padded), followed by the `horizon`
/// slots of `day` as MASK tokens. Only slots with a ground-truth record carry
/// loss. Returns `None` when `day` has fewer than `min_observed` records.
pub fn forecast_window(
    user: &UserTrajectory,
    day: u16,
    grid: Grid,
    cfg: &WindowConfig,
) -> Result<Option<SequenceExample>> {
    let mut truth: Vec<Option<u32>> = vec![None; cfg.horizon];
    for r in user.records.iter().filter(|r| r.day == day) {
        if (r.slot as usize) < cfg.horizon {
            truth[r.slot as usize] = Some(grid.cell_to_class(r.cell)?.0);
        }
    }
    let observed = truth.iter().filter(|t| t.is_some()).count();
    if observed == 0 || observed < cfg.min_observed {
        return Ok(None);
    }
    let history_end = if cfg.history_from_test {
        day
    } else {
        day.min(cfg.test_start)
    };
    let past: Vec<Record> = user
        .records
        .iter()
        .filter(|r| r.day < history_end)
        .copied()
        .collect();
    let past = &past[past.len().saturating_sub(cfg.history_len)..];

    let mut b = Builder::new(user.uid, cfg.seq_len(), grid, Some(day));
    b.history(past, cfg.history_len, grid, cfg.calendar)?;
    for s in 0..cfg.horizon {
        let i = cfg.history_len + s;
        b.set(i, grid.mask().0, day, s as u8, cfg.calendar);
        if let Some(t) = truth[s] {
            b.ex.loss_mask[i] = true;
            b.ex.targets[i] = Some(t);
        }
    }
    Ok(Some(b.ex))
}

/// One forecast window per day of the split: test days
/// `[test_start, 75)`, or training days `[1, test_start)`.
pub fn build_forecast_windows(
    user: &UserTrajectory,
    split: Split,
    grid: Grid,
    cfg: &WindowConfig,
) -> Result<Vec<SequenceExample>> {
    let days = match split {
        Split::Train => 1..cfg.test_start,
        Split::Test => cfg.test_start..NUM_DAYS as u16,
    };
    let mut out = Vec::new();
    for day in days {
        if let Some(ex) = forecast_window(user, day, grid, cfg)? {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Masked-modeling windows over the user's observed records in `days`.
///
/// Windows of `seq_len` consecutive observed records start every
/// `mlm_stride` records; a user with at most `seq_len` records yields one
/// left-padded window. In each window `⌊mask_ratio · n_real⌋` (at least one)
/// real positions are drawn without replacement and replaced by MASK.
pub fn build_mlm_windows(
    user: &UserTrajectory,
    days: Range<u16>,
    grid: Grid,
    cfg: &WindowConfig,
    rng: &mut Rng,
) -> Result<Vec<SequenceExample>> {
    if cfg.mask_ratio <= 0.0 || !cfg.mask_ratio.is_finite() {
        return Err(Error::MaskRatio);
    }
    if cfg.mask_ratio >= 1.0 {
        return Err(Error::Config(alloc::format!(
            "mask ratio {} must be below 1",
            cfg.mask_ratio
        )));
    }
    if cfg.mlm_stride == 0 {
        return Err(Error::Config("mlm stride must be positive".into()));
    }
    let records: Vec<Record> = user
        .records
        .iter()
        .filter(|r| days.contains(&r.day))
        .copied()
        .collect();
    let len = cfg.seq_len();
    let mut spans = Vec::new();
    if records.is_empty() {
        return Ok(Vec::new());
    } else if records.len() <= len {
        spans.push(0..records.len());
    } else {
        let mut start = 0;
        while start + len <= records.len() {
            spans.push(start..start + len);
            start += cfg.mlm_stride;
        }
    }
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        let chunk = &records[span];
        let mut b = Builder::new(user.uid, len, grid, None);
        b.history(chunk, len, grid, cfg.calendar)?;
        let n_real = chunk.len();
        let offset = len - n_real;
        let n_mask = ((cfg.mask_ratio * n_real as f64 + 1e-9) as usize).clamp(1, n_real);
        let mut picks = index::sample(rng, n_real, n_mask).into_vec();
        picks.sort_unstable();
        for p in picks {
            let i = offset + p;
            b.ex.targets[i] = Some(b.ex.tokens[i]);
            b.ex.tokens[i] = grid.mask().0;
            b.ex.loss_mask[i] = true;
        }
        out.push(b.ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::GridCell;
    use crate::rng;

    fn dense_user(grid: Grid) -> UserTrajectory {
        let mut records = Vec::new();
        for day in 0..NUM_DAYS as u16 {
            for slot in 0..SLOTS_PER_DAY as u8 {
                records.push(Record {
                    uid: 3,
                    day,
                    slot,
                    cell: GridCell::new(day % 5, (slot % 7) as u16),
                });
            }
        }
        let _ = grid;
        UserTrajectory { uid: 3, records }
    }

    #[test]
    fn split_boundaries() {
        let r = |day| Record {
            uid: 0,
            day,
            slot: 0,
            cell: GridCell::new(0, 0),
        };
        let (train, test) = split_train_test(&[r(59), r(60), r(0), r(74)], 60);
        assert_eq!(train.iter().map(|r| r.day).collect::<Vec<_>>(), [59, 0]);
        assert_eq!(test.iter().map(|r| r.day).collect::<Vec<_>>(), [60, 74]);
        let (a, b) = split_train_test(&[], 60);
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn dense_user_gets_fifteen_full_windows() {
        let grid = Grid::new(40).unwrap();
        let cfg = WindowConfig::default();
        let user = dense_user(grid);
        let windows = build_forecast_windows(&user, Split::Test, grid, &cfg).unwrap();
        assert_eq!(windows.len(), 15);
        for w in &windows {
            w.validate(grid, cfg.calendar).unwrap();
            assert_eq!(w.len(), 240);
            assert_eq!(w.loss_mask.iter().filter(|&&m| m).count(), 48);
            assert_eq!(w.attn_mask.iter().filter(|&&m| m).count(), 240);
            assert!(w.loss_mask[..192].iter().all(|&m| !m));
            // history ends on the day before the forecast day
            assert_eq!(w.day[191], w.target_day.unwrap() - 1);
            assert_eq!(w.slot[191], 47);
        }
    }

    #[test]
    fn missing_day_has_no_window() {
        let grid = Grid::new(40).unwrap();
        let cfg = WindowConfig::default();
        let mut user = dense_user(grid);
        user.records.retain(|r| r.day != 61);
        let windows = build_forecast_windows(&user, Split::Test, grid, &cfg).unwrap();
        assert_eq!(windows.len(), 14);
        assert!(windows.iter().all(|w| w.target_day != Some(61)));
    }

    #[test]
    fn history_from_test_switch() {
        let grid = Grid::new(40).unwrap();
        let cfg = WindowConfig {
            history_from_test: false,
            ..WindowConfig::default()
        };
        let user = dense_user(grid);
        let w = forecast_window(&user, 70, grid, &cfg).unwrap().unwrap();
        assert_eq!(w.day[191], 59);
    }

    #[test]
    fn mlm_mask_count_and_determinism() {
        let grid = Grid::new(40).unwrap();
        let cfg = WindowConfig::default();
        let user = dense_user(grid);
        let run = |seed| build_mlm_windows(&user, 0..60, grid, &cfg, &mut rng::seeded(seed)).unwrap();
        let a = run(11);
        assert_eq!(a, run(11));
        assert_ne!(a, run(12));
        // 2880 records, windows every 48 records
        assert_eq!(a.len(), (2880 - 240) / 48 + 1);
        for w in &a {
            w.validate(grid, cfg.calendar).unwrap();
            assert_eq!(w.loss_mask.iter().filter(|&&m| m).count(), 36);
        }
        let zero = WindowConfig {
            mask_ratio: 0.0,
            ..cfg
        };
        assert_eq!(
            build_mlm_windows(&user, 0..60, grid, &zero, &mut rng::seeded(1)),
            Err(Error::MaskRatio)
        );
    }
}
