//! Synthetic commuter city.
//!
//! Every user has a home, a work place and up to two leisure places. On
//! weekdays they are at home overnight and at work over a window that covers
//! 08:00–18:00; on weekends they stay home apart from a fixed leisure outing.
//! Slots are recorded with a higher probability during the day than at night
//! and less often on weekends. With probability `epsilon` a recorded slot is
//! replaced by a uniformly random cell.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Calendar, Grid, GridCell, Record, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Where homes and work places cluster, as fractions of the grid side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geography {
    pub home_center: (f64, f64),
    pub home_spread: f64,
    pub work_center: (f64, f64),
    pub work_spread: f64,
}

impl Geography {
    /// Homes spread over the city, work places around the center.
    pub const CENTRAL: Geography = Geography {
        home_center: (0.5, 0.5),
        home_spread: 0.3,
        work_center: (0.5, 0.5),
        work_spread: 0.12,
    };

    /// A differently laid out city: homes in the north-east, a business
    /// district in the south-west.
    pub const SHIFTED: Geography = Geography {
        home_center: (0.7, 0.3),
        home_spread: 0.15,
        work_center: (0.25, 0.75),
        work_spread: 0.08,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub days: u16,
    /// Probability that a recorded slot is a random excursion cell.
    pub epsilon: f64,
    /// Excursions stay within this many cells of the schedule; 0 = anywhere.
    pub excursion_radius: u16,
    /// Recording probability for slots 16..36 (08:00–18:00).
    pub presence_day: f64,
    /// Recording probability outside 08:00–18:00.
    pub presence_night: f64,
    /// Multiplier on the recording probability on weekends.
    pub weekend_presence: f64,
    pub max_leisure: u8,
    pub geography: Geography,
    pub calendar: Calendar,
    pub first_uid: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            days: 75,
            epsilon: 0.02,
            excursion_radius: 3,
            presence_day: 0.9,
            presence_night: 0.35,
            weekend_presence: 0.7,
            max_leisure: 2,
            geography: Geography::CENTRAL,
            calendar: Calendar::default(),
            first_uid: 0,
        }
    }
}

/// Fixed routine of one synthetic user.
#[derive(Clone, Debug, PartialEq)]
pub struct Routine {
    pub home: GridCell,
    pub work: GridCell,
    pub leisure: Vec<GridCell>,
    pub work_start: u8,
    pub work_end: u8,
    pub outing_start: u8,
    pub outing_end: u8,
}

impl Routine {
    /// Scheduled cell for a weekday index (0 = Monday) and slot.
    pub fn scheduled(&self, weekday: u8, slot: u8) -> GridCell {
        if weekday < 5 {
            if (self.work_start..self.work_end).contains(&slot) {
                self.work
            } else {
                self.home
            }
        } else if !self.leisure.is_empty() && (self.outing_start..self.outing_end).contains(&slot) {
            self.leisure[(weekday as usize - 5) % self.leisure.len()]
        } else {
            self.home
        }
    }
}

fn clustered(center: (f64, f64), spread: f64, grid: Grid, rng: &mut Rng) -> GridCell {
    let side = grid.side() as f64;
    let normal = Normal::new(0.0, (spread * side).max(1e-9)).expect("finite spread");
    let coord = |c: f64, rng: &mut Rng| {
        let v = c * side + normal.sample(rng);
        libm::floor(v).clamp(0.0, side - 1.0) as u16
    };
    GridCell::new(coord(center.0, rng), coord(center.1, rng))
}

fn random_cell(grid: Grid, rng: &mut Rng) -> GridCell {
    let side = grid.side() as u16;
    GridCell::new(rng.random_range(0..side), rng.random_range(0..side))
}

fn excursion_cell(around: GridCell, radius: u16, grid: Grid, rng: &mut Rng) -> GridCell {
    if radius == 0 {
        return random_cell(grid, rng);
    }
    let r = radius as i32;
    let max = grid.side() as i32 - 1;
    let dx = rng.random_range(-r..=r);
    let dy = rng.random_range(-r..=r);
    GridCell::new(
        (around.x as i32 + dx).clamp(0, max) as u16,
        (around.y as i32 + dy).clamp(0, max) as u16,
    )
}

/// Draws the routine for one user from its own seeded stream.
pub fn routine(grid: Grid, params: &SynthParams, rng: &mut Rng) -> Routine {
    let geo = params.geography;
    let home = clustered(geo.home_center, geo.home_spread, grid, rng);
    let mut work = clustered(geo.work_center, geo.work_spread, grid, rng);
    while work == home && grid.num_cells() > 1 {
        work = random_cell(grid, rng);
    }
    let n_leisure = rng.random_range(0..=params.max_leisure);
    let leisure = (0..n_leisure).map(|_| random_cell(grid, rng)).collect();
    let work_start = rng.random_range(14..=16);
    let work_end = rng.random_range(36..=38);
    let outing_start = rng.random_range(18..=24);
    let outing_end = outing_start + rng.random_range(4..=10);
    Routine {
        home,
        work,
        leisure,
        work_start,
        work_end,
        outing_start,
        outing_end,
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("{name} = {p} is not a probability")))
    }
}

/// Generates `n_users` users over `params.days` days, sorted by
/// `(uid, day, slot)`. Each user draws from a stream derived from
/// `(seed, uid)`, so the output is a pure function of the arguments.
pub fn synthesize_city(n_users: usize, grid: Grid, seed: u64, params: &SynthParams) -> Result<Vec<Record>> {
    if n_users == 0 {
        return Err(Error::Config("n_users must be at least 1".into()));
    }
    check_probability("epsilon", params.epsilon)?;
    check_probability("presence_day", params.presence_day)?;
    check_probability("presence_night", params.presence_night)?;
    check_probability("weekend_presence", params.weekend_presence)?;
    if params.days as usize > super::NUM_DAYS {
        return Err(Error::Config(alloc::format!("days {} > 75", params.days)));
    }
    let mut out = Vec::new();
    for u in 0..n_users {
        let uid = params.first_uid + u as u32;
        let mut rng = rng::derived(seed, &[uid as u64]);
        let r = routine(grid, params, &mut rng);
        for day in 0..params.days {
            let weekday = params.calendar.day_of_week(day);
            let scale = if weekday >= 5 { params.weekend_presence } else { 1.0 };
            for slot in 0..SLOTS_PER_DAY as u8 {
                let base = if (16..36).contains(&slot) {
                    params.presence_day
                } else {
                    params.presence_night
                };
                // Draw every variate unconditionally so streams stay aligned
                // across parameter changes.
                let seen = rng.random::<f64>() < base * scale;
                let excursion = rng.random::<f64>() < params.epsilon;
                let scheduled = r.scheduled(weekday, slot);
                let noise = excursion_cell(scheduled, params.excursion_radius, grid, &mut rng);
                if !seen {
                    continue;
                }
                let cell = if excursion { noise } else { scheduled };
                out.push(Record { uid, day, slot, cell });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_weekday_nine_am_is_work() {
        let grid = Grid::new(40).unwrap();
        let params = SynthParams {
            epsilon: 0.0,
            presence_day: 1.0,
            presence_night: 1.0,
            weekend_presence: 1.0,
            ..SynthParams::default()
        };
        let recs = synthesize_city(5, grid, 3, &params).unwrap();
        assert_eq!(recs.len(), 5 * 75 * 48);
        for uid in 0..5u32 {
            let r = routine(grid, &params, &mut rng::derived(3, &[uid as u64]));
            for rec in recs.iter().filter(|x| x.uid == uid && x.slot == 18) {
                if !params.calendar.is_weekend(rec.day) {
                    assert_eq!(rec.cell, r.work);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let grid = Grid::new(40).unwrap();
        let p = SynthParams::default();
        assert_eq!(
            synthesize_city(4, grid, 9, &p).unwrap(),
            synthesize_city(4, grid, 9, &p).unwrap()
        );
        assert_ne!(
            synthesize_city(4, grid, 9, &p).unwrap(),
            synthesize_city(4, grid, 10, &p).unwrap()
        );
    }

    #[test]
    fn zero_users_is_an_error() {
        let grid = Grid::new(40).unwrap();
        assert!(synthesize_city(0, grid, 1, &SynthParams::default()).is_err());
    }

    #[test]
    fn daytime_and_weekday_activity_dominate() {
        let grid = Grid::new(40).unwrap();
        let p = SynthParams::default();
        let recs = synthesize_city(30, grid, 5, &p).unwrap();
        let mut per_slot = [0usize; 48];
        let mut per_day = [0usize; 75];
        for r in &recs {
            per_slot[r.slot as usize] += 1;
            per_day[r.day as usize] += 1;
        }
        let day_mean = per_slot[16..=36].iter().sum::<usize>() as f64 / 21.0;
        let other: Vec<usize> = per_slot[..16].iter().chain(&per_slot[37..]).copied().collect();
        let other_mean = other.iter().sum::<usize>() as f64 / other.len() as f64;
        assert!(day_mean > other_mean);

        let (mut wd, mut nwd, mut we, mut nwe) = (0usize, 0usize, 0usize, 0usize);
        for (d, &c) in per_day.iter().enumerate() {
            if p.calendar.is_weekend(d as u16) {
                we += c;
                nwe += 1;
            } else {
                wd += c;
                nwd += 1;
            }
        }
        assert!(wd as f64 / nwd as f64 > we as f64 / nwe as f64);
    }
}
