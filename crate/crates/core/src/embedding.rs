//! Spatial-temporal input embedding: five lookup tables (day, time slot,
//! day of week, weekend flag, location) concatenated per position and
//! projected to the hidden width.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mobility::{Grid, SequenceExample, NUM_DAYS, SLOTS_PER_DAY};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub day: usize,
    pub time: usize,
    pub day_of_week: usize,
    pub weekend: usize,
    pub location: usize,
    /// Adds a learned absolute position table (off by default: day and slot
    /// already encode absolute time).
    pub positional: bool,
}

impl EmbeddingConfig {
    pub const PAPER: EmbeddingConfig = EmbeddingConfig {
        day: 64,
        time: 64,
        day_of_week: 64,
        weekend: 32,
        location: 256,
        positional: false,
    };

    /// Every width divided by `factor`.
    pub fn scaled(factor: usize) -> Self {
        let p = Self::PAPER;
        Self {
            day: p.day / factor,
            time: p.time / factor,
            day_of_week: p.day_of_week / factor,
            weekend: p.weekend / factor,
            location: p.location / factor,
            positional: false,
        }
    }

    /// Width of the concatenated per-position vector.
    pub fn concat_width(&self) -> usize {
        self.day + self.time + self.day_of_week + self.weekend + self.location
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub config: EmbeddingConfig,
    pub grid: Grid,
    pub day: ParamId,
    pub slot: ParamId,
    pub day_of_week: ParamId,
    pub weekend: ParamId,
    pub location: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub positional: Option<ParamId>,
}

impl EmbeddingTables {
    /// Draws every table from N(0, 0.02²) and zeroes the PAD location row.
    pub fn init(
        config: EmbeddingConfig,
        grid: Grid,
        hidden: usize,
        max_len: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let widths = [config.day, config.time, config.day_of_week, config.weekend, config.location];
        if widths.contains(&0) || hidden == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        let day = store.add_normal("embed.day", &[NUM_DAYS, config.day], INIT_STD, rng);
        let slot = store.add_normal("embed.slot", &[SLOTS_PER_DAY, config.time], INIT_STD, rng);
        let day_of_week = store.add_normal("embed.dow", &[7, config.day_of_week], INIT_STD, rng);
        let weekend = store.add_normal("embed.weekend", &[2, config.weekend], INIT_STD, rng);
        let location = store.add_normal("embed.loc", &[grid.vocab_size(), config.location], INIT_STD, rng);
        let proj_w = store.add_normal("embed.proj.w", &[config.concat_width(), hidden], INIT_STD, rng);
        let proj_b = store.add("embed.proj.b", crate::Tensor::zeros(&[hidden]));
        let positional = config
            .positional
            .then(|| store.add_normal("embed.pos", &[max_len, hidden], INIT_STD, rng));
        let tables = Self {
            config,
            grid,
            day,
            slot,
            day_of_week,
            weekend,
            location,
            proj_w,
            proj_b,
            positional,
        };
        tables.zero_pad_row(store);
        Ok(tables)
    }

    fn pad_row_range(&self) -> core::ops::Range<usize> {
        let w = self.config.location;
        let pad = self.grid.pad().0 as usize;
        pad * w..(pad + 1) * w
    }

    /// Forces the PAD location row to zero (values).
    pub fn zero_pad_row(&self, store: &mut ParamStore) {
        let range = self.pad_row_range();
        store.get_mut(self.location).data_mut()[range].fill(0.0);
    }

    /// Drops any gradient that reached the PAD location row.
    pub fn zero_pad_grad(&self, store: &mut ParamStore) {
        let range = self.pad_row_range();
        if let Some(g) = store.get_mut(self.location).grad_mut() {
            g[range].fill(0.0);
        }
    }

    fn lookup(
        g: &mut Graph,
        store: &ParamStore,
        table: ParamId,
        field: &'static str,
        idx: impl Iterator<Item = usize>,
    ) -> Result<Var> {
        let bound = store.get(table).shape()[0];
        let rows: Vec<usize> = idx.collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
            return Err(Error::IndexOutOfRange {
                field,
                index: bad,
                bound,
            });
        }
        let t = g.param(store, table);
        g.gather_rows(t, &rows)
    }

    /// Embeds every position of `ex` into a `[T×H]` matrix.
    pub fn embed_sequence(&self, g: &mut Graph, store: &ParamStore, ex: &SequenceExample) -> Result<Var> {
        let parts = [
            Self::lookup(g, store, self.day, "day", ex.day.iter().map(|&d| d as usize))?,
            Self::lookup(g, store, self.slot, "slot", ex.slot.iter().map(|&s| s as usize))?,
            Self::lookup(g, store, self.day_of_week, "day_of_week", ex.day_of_week.iter().map(|&d| d as usize))?,
            Self::lookup(g, store, self.weekend, "weekend", ex.weekend.iter().map(|&w| w as usize))?,
            Self::lookup(g, store, self.location, "location", ex.tokens.iter().map(|&t| t as usize))?,
        ];
        let cat = g.concat_cols(&parts)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let mut x = g.linear(cat, w, b)?;
        if let Some(pos) = self.positional {
            let n = ex.len();
            let bound = store.get(pos).shape()[0];
            if n > bound {
                return Err(Error::IndexOutOfRange {
                    field: "position",
                    index: n - 1,
                    bound,
                });
            }
            let p = Self::lookup(g, store, pos, "position", 0..n)?;
            x = g.add(x, p)?;
        }
        Ok(x)
    }

    /// Embedding of the CLS token: the CLS location row with day, slot,
    /// weekday and weekend index 0, projected like any other position.
    pub fn embed_cls(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let cls = self.grid.cls().0 as usize;
        let parts = [
            Self::lookup(g, store, self.day, "day", core::iter::once(0))?,
            Self::lookup(g, store, self.slot, "slot", core::iter::once(0))?,
            Self::lookup(g, store, self.day_of_week, "day_of_week", core::iter::once(0))?,
            Self::lookup(g, store, self.weekend, "weekend", core::iter::once(0))?,
            Self::lookup(g, store, self.location, "location", core::iter::once(cls))?,
        ];
        let cat = g.concat_cols(&parts)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        g.linear(cat, w, b)
    }

    pub fn describe(&self) -> alloc::string::String {
        let c = &self.config;
        format!(
            "day {} + time {} + dow {} + weekend {} + location {} = {}",
            c.day,
            c.time,
            c.day_of_week,
            c.weekend,
            c.location,
            c.concat_width()
        )
    }
}
