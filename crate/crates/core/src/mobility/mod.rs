//! Grid / trajectory data model, train-test split, sequence construction and
//! the synthetic commuter city.

mod synth;
mod windows;

pub use synth::{routine, synthesize_city, Geography, Routine, SynthParams};
pub use windows::{
    build_forecast_windows, build_mlm_windows, forecast_window, split_train_test, Split,
    WindowConfig,
};

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default grid side of the four-city datasets.
pub const GRID_SIDE: usize = 200;
/// Days covered by a dataset.
pub const NUM_DAYS: usize = 75;
/// Half-hour slots per day.
pub const SLOTS_PER_DAY: usize = 48;
/// First test day; days `[0, TEST_START)` are training days.
pub const TEST_START: u16 = 60;

/// A cell on a `G×G` grid, 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridCell {
    pub x: u16,
    pub y: u16,
}

impl GridCell {
    pub const fn new(x: u16, y: u16) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: GridCell) -> f64 {
        let dx = f64::from(self.x) - f64::from(other.x);
        let dy = f64::from(self.y) - f64::from(other.y);
        libm::sqrt(dx * dx + dy * dy)
    }
}

/// Flattened cell id, or one of the three special tokens that follow the
/// `G²` real classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocationClass(pub u32);

/// Grid geometry and the class-id layout derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    side: usize,
}

impl Grid {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || side > u16::MAX as usize {
            return Err(Error::Config(alloc::format!("grid side {side}")));
        }
        Ok(Self { side })
    }

    pub fn side(self) -> usize {
        self.side
    }

    /// Number of real location classes, `G²`.
    pub fn num_cells(self) -> usize {
        self.side * self.side
    }

    /// Vocabulary size including PAD, MASK and CLS.
    pub fn vocab_size(self) -> usize {
        self.num_cells() + 3
    }

    pub fn pad(self) -> LocationClass {
        LocationClass(self.num_cells() as u32)
    }

    pub fn mask(self) -> LocationClass {
        LocationClass(self.num_cells() as u32 + 1)
    }

    pub fn cls(self) -> LocationClass {
        LocationClass(self.num_cells() as u32 + 2)
    }

    pub fn contains(self, cell: GridCell) -> bool {
        (cell.x as usize) < self.side && (cell.y as usize) < self.side
    }

    /// `id = x·G + y`.
    pub fn cell_to_class(self, cell: GridCell) -> Result<LocationClass> {
        if !self.contains(cell) {
            return Err(Error::IndexOutOfRange {
                field: "cell",
                index: cell.x.max(cell.y) as usize,
                bound: self.side,
            });
        }
        Ok(LocationClass((cell.x as usize * self.side + cell.y as usize) as u32))
    }

    pub fn class_to_cell(self, class: LocationClass) -> Result<GridCell> {
        let id = class.0 as usize;
        if id >= self.num_cells() {
            return Err(Error::SpecialClass(class.0));
        }
        Ok(GridCell::new((id / self.side) as u16, (id % self.side) as u16))
    }
}

/// Day-of-week convention. The data carries no calendar anchor, so day 0 is
/// assigned a weekday explicitly (0 = Monday by default).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Calendar {
    pub day0_weekday: u8,
}

impl Calendar {
    pub fn day_of_week(self, day: u16) -> u8 {
        ((day as u32 + self.day0_weekday as u32) % 7) as u8
    }

    pub fn is_weekend(self, day: u16) -> bool {
        self.day_of_week(day) >= 5
    }
}

/// One observation: user `uid` was in `cell` during `slot` of `day`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Record {
    pub uid: u32,
    pub day: u16,
    pub slot: u8,
    pub cell: GridCell,
}

impl Record {
    /// Absolute slot index used for chronological ordering.
    pub fn time(&self) -> u32 {
        self.day as u32 * SLOTS_PER_DAY as u32 + self.slot as u32
    }
}

/// All records of one user, sorted by `(day, slot)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserTrajectory {
    pub uid: u32,
    pub records: Vec<Record>,
}

/// Sorts records by `(uid, day, slot)`, keeps the first of any duplicate
/// `(uid, day, slot)` and groups them per user (ascending uid).
pub fn group_by_user(mut records: Vec<Record>) -> Vec<UserTrajectory> {
    // Stable sort keeps file order among duplicates, so dedup keeps the first.
    records.sort_by_key(|r| (r.uid, r.day, r.slot));
    records.dedup_by_key(|r| (r.uid, r.day, r.slot));
    let mut users: Vec<UserTrajectory> = Vec::new();
    for r in records {
        match users.last_mut() {
            Some(u) if u.uid == r.uid => u.records.push(r),
            _ => users.push(UserTrajectory {
                uid: r.uid,
                records: alloc::vec![r],
            }),
        }
    }
    users
}

/// One model input of fixed length: temporal features, location tokens,
/// attention / loss masks and targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceExample {
    pub uid: u32,
    /// Forecast day for forecast windows; `None` for MLM windows.
    pub target_day: Option<u16>,
    pub tokens: Vec<u32>,
    pub day: Vec<u16>,
    pub slot: Vec<u8>,
    pub day_of_week: Vec<u8>,
    pub weekend: Vec<u8>,
    pub attn_mask: Vec<bool>,
    pub loss_mask: Vec<bool>,
    pub targets: Vec<Option<u32>>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions contributing to the loss, ascending.
    pub fn loss_positions(&self) -> Vec<usize> {
        self.loss_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Target class ids at [`SequenceExample::loss_positions`].
    pub fn loss_targets(&self) -> Vec<usize> {
        self.loss_positions()
            .into_iter()
            .map(|i| self.targets[i].expect("loss position has a target") as usize)
            .collect()
    }

    /// Checks every structural invariant of the example.
    pub fn validate(&self, grid: Grid, calendar: Calendar) -> Result<()> {
        let n = self.tokens.len();
        let lens = [
            self.day.len(),
            self.slot.len(),
            self.day_of_week.len(),
            self.weekend.len(),
            self.attn_mask.len(),
            self.loss_mask.len(),
            self.targets.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != n) {
            return Err(Error::LengthMismatch(bad, n));
        }
        let bad = |what: &str, i: usize| Err(Error::Config(alloc::format!("position {i}: {what}")));
        for i in 0..n {
            if self.loss_mask[i] && !self.attn_mask[i] {
                return bad("loss mask outside attention mask", i);
            }
            if self.loss_mask[i] && self.tokens[i] != grid.mask().0 {
                return bad("loss position is not a MASK token", i);
            }
            match self.targets[i] {
                Some(t) if !self.loss_mask[i] => return bad(&alloc::format!("stray target {t}"), i),
                Some(t) if t as usize >= grid.num_cells() => return bad("special id as target", i),
                None if self.loss_mask[i] => return bad("loss position without target", i),
                _ => {}
            }
            if !self.attn_mask[i] && self.tokens[i] != grid.pad().0 {
                return bad("unattended position is not PAD", i);
            }
            if self.attn_mask[i] && self.tokens[i] == grid.pad().0 {
                return bad("attended PAD token", i);
            }
            if self.tokens[i] as usize >= grid.vocab_size() {
                return bad("token outside vocabulary", i);
            }
            if self.day[i] as usize >= NUM_DAYS || self.slot[i] as usize >= SLOTS_PER_DAY {
                return bad("day or slot out of range", i);
            }
            if self.day_of_week[i] != calendar.day_of_week(self.day[i]) {
                return bad("day_of_week inconsistent with day", i);
            }
            if self.weekend[i] != u8::from(calendar.is_weekend(self.day[i])) {
                return bad("weekend flag inconsistent with day", i);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_layout() {
        let g = Grid::new(200).unwrap();
        assert_eq!(g.cell_to_class(GridCell::new(0, 0)).unwrap(), LocationClass(0));
        assert_eq!(g.cell_to_class(GridCell::new(1, 2)).unwrap(), LocationClass(202));
        assert_eq!(g.pad(), LocationClass(40_000));
        assert_eq!(g.mask(), LocationClass(40_001));
        assert_eq!(g.cls(), LocationClass(40_002));
        for special in [g.pad(), g.mask(), g.cls()] {
            assert_eq!(g.class_to_cell(special), Err(Error::SpecialClass(special.0)));
        }
        assert!(g.cell_to_class(GridCell::new(200, 0)).is_err());
    }

    #[test]
    fn calendar_default_is_monday_first() {
        let c = Calendar::default();
        assert_eq!(c.day_of_week(0), 0);
        assert!(!c.is_weekend(4));
        assert!(c.is_weekend(5) && c.is_weekend(6));
        assert_eq!(c.day_of_week(7), 0);
        let shifted = Calendar { day0_weekday: 6 };
        assert!(shifted.is_weekend(0));
        assert_eq!(shifted.day_of_week(1), 0);
    }

    #[test]
    fn group_by_user_sorts_and_keeps_first_duplicate() {
        let r = |uid, day, slot, x| Record {
            uid,
            day,
            slot,
            cell: GridCell::new(x, 0),
        };
        let users = group_by_user(alloc::vec![
            r(2, 1, 0, 9),
            r(1, 0, 5, 1),
            r(1, 0, 5, 2),
            r(1, 0, 3, 3),
        ]);
        assert_eq!(users.len(), 2);
        assert_eq!(users[0].uid, 1);
        assert_eq!(users[0].records, alloc::vec![r(1, 0, 3, 3), r(1, 0, 5, 1)]);
        assert_eq!(users[1].records, alloc::vec![r(2, 1, 0, 9)]);
    }
}
