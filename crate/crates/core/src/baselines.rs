//! Reference predictors: the per-user historical-frequency table and the
//! single-expert configuration of the neural model.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::mobility::{Calendar, Grid, SequenceExample, UserTrajectory};
use crate::model::ModelConfig;

/// How the frequency table buckets days.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DayType {
    /// One bucket per day of week.
    #[default]
    DayOfWeek,
    /// Two buckets: weekday and weekend.
    WeekdayWeekend,
}

impl DayType {
    fn bucket(self, day_of_week: u8) -> u8 {
        match self {
            DayType::DayOfWeek => day_of_week,
            DayType::WeekdayWeekend => u8::from(day_of_week >= 5),
        }
    }
}

/// Class counts sorted by count descending, then class id ascending.
pub type Ranked = Vec<(u32, u32)>;

fn rank(counts: BTreeMap<u32, u32>) -> Ranked {
    let mut v: Ranked = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

#[derive(Clone, Debug, Default, PartialEq)]
struct UserTable {
    by_key: BTreeMap<(u8, u8), Ranked>,
    by_slot: BTreeMap<u8, Ranked>,
    global: Ranked,
}

/// Per-user historical frequency of locations at each (day type, slot).
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub day_type: DayType,
    pub calendar: Calendar,
    users: BTreeMap<u32, UserTable>,
    city: Ranked,
}

impl FrequencyTable {
    /// Tallies all records on days before `until_day`.
    pub fn fit(users: &[UserTrajectory], grid: Grid, calendar: Calendar, day_type: DayType, until_day: u16) -> Result<Self> {
        let mut tables = BTreeMap::new();
        let mut city: BTreeMap<u32, u32> = BTreeMap::new();
        for u in users {
            let mut by_key: BTreeMap<(u8, u8), BTreeMap<u32, u32>> = BTreeMap::new();
            let mut by_slot: BTreeMap<u8, BTreeMap<u32, u32>> = BTreeMap::new();
            let mut global: BTreeMap<u32, u32> = BTreeMap::new();
            for r in u.records.iter().filter(|r| r.day < until_day) {
                let class = grid.cell_to_class(r.cell)?.0;
                let bucket = day_type.bucket(calendar.day_of_week(r.day));
                *by_key.entry((bucket, r.slot)).or_default().entry(class).or_default() += 1;
                *by_slot.entry(r.slot).or_default().entry(class).or_default() += 1;
                *global.entry(class).or_default() += 1;
                *city.entry(class).or_default() += 1;
            }
            if global.is_empty() {
                continue;
            }
            tables.insert(
                u.uid,
                UserTable {
                    by_key: by_key.into_iter().map(|(k, c)| (k, rank(c))).collect(),
                    by_slot: by_slot.into_iter().map(|(k, c)| (k, rank(c))).collect(),
                    global: rank(global),
                },
            );
        }
        if city.is_empty() {
            return Err(Error::EmptyTable);
        }
        Ok(Self {
            day_type,
            calendar,
            users: tables,
            city: rank(city),
        })
    }

    /// Ranked counts for a (uid, day of week, slot) key, if observed.
    pub fn entry(&self, uid: u32, day_of_week: u8, slot: u8) -> Option<&Ranked> {
        let bucket = self.day_type.bucket(day_of_week);
        self.users.get(&uid)?.by_key.get(&(bucket, slot))
    }

    /// Most frequent class with fallbacks: same slot on any day type, then
    /// the user's overall mode, then the city's overall mode.
    pub fn predict(&self, uid: u32, day_of_week: u8, slot: u8) -> u32 {
        let bucket = self.day_type.bucket(day_of_week);
        if let Some(t) = self.users.get(&uid) {
            if let Some(r) = t.by_key.get(&(bucket, slot)) {
                return r[0].0;
            }
            if let Some(r) = t.by_slot.get(&slot) {
                return r[0].0;
            }
            return t.global[0].0;
        }
        self.city[0].0
    }
}

impl Predictor for FrequencyTable {
    fn predict_window(&self, ex: &SequenceExample) -> Result<Vec<u32>> {
        Ok(ex
            .loss_positions()
            .into_iter()
            .map(|i| self.predict(ex.uid, ex.day_of_week[i], ex.slot[i]))
            .collect())
    }
}

/// The neural model with a single always-selected expert.
pub fn naive_bert_config(mut config: ModelConfig) -> ModelConfig {
    config.moe.experts = 1;
    config.moe.top_k = 1;
    config
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{GridCell, Record};
    use alloc::vec;

    fn rec(uid: u32, day: u16, slot: u8, x: u16) -> Record {
        Record {
            uid,
            day,
            slot,
            cell: GridCell { x, y: 0 },
        }
    }

    #[test]
    fn mode_ties_and_fallbacks() {
        let grid = Grid::new(10).unwrap();
        let cal = Calendar::default();
        // Day 0 and 7 are Mondays, day 5 a Saturday.
        let u = UserTrajectory {
            uid: 1,
            records: vec![rec(1, 0, 3, 4), rec(1, 7, 3, 2), rec(1, 5, 9, 6), rec(1, 5, 9, 6), rec(1, 70, 3, 8)],
        };
        let t = FrequencyTable::fit(&[u], grid, cal, DayType::DayOfWeek, 60).unwrap();
        // Tie between classes 20 and 40 resolves to the smaller id.
        assert_eq!(t.predict(1, 0, 3), 20);
        // Tuesday slot 3 unseen: same slot on any day.
        assert_eq!(t.predict(1, 1, 3), 20);
        // Slot 10 unseen: user mode.
        assert_eq!(t.predict(1, 0, 10), 60);
        // Unknown user: city mode.
        assert_eq!(t.predict(9, 0, 3), 60);
        let coarse = FrequencyTable::fit(&[UserTrajectory { uid: 1, records: vec![rec(1, 5, 9, 6)] }], grid, cal, DayType::WeekdayWeekend, 60).unwrap();
        assert_eq!(coarse.entry(1, 6, 9).unwrap()[0], (60, 1));
        assert!(coarse.entry(1, 2, 9).is_none());
    }

    #[test]
    fn empty_table_is_an_error() {
        let grid = Grid::new(10).unwrap();
        let u = UserTrajectory { uid: 1, records: vec![rec(1, 65, 3, 4)] };
        assert!(matches!(
            FrequencyTable::fit(&[u], grid, Calendar::default(), DayType::DayOfWeek, 60),
            Err(Error::EmptyTable)
        ));
    }
}
