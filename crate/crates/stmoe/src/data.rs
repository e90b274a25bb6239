//! City CSV files (`uid,d,t,x,y`, 1-based coordinates) and the sidecar
//! written next to generated cities.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stmoe_core::mobility::{
    group_by_user, synthesize_city, Calendar, Geography, Grid, GridCell, Record, SynthParams, UserTrajectory,
    NUM_DAYS, SLOTS_PER_DAY,
};

use crate::error::{AppError, AppResult};

pub const HEADER: [&str; 5] = ["uid", "d", "t", "x", "y"];

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> AppResult<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.trim().parse().map_err(|_| AppError::Row {
        line,
        message: format!("column {} is not an integer: {raw:?}", HEADER[i]),
    })
}

/// Parses one data row (file line `line`) into a record with 0-based cell.
pub fn parse_row(rec: &csv::StringRecord, line: u64, grid: Grid) -> AppResult<Record> {
    if rec.len() != HEADER.len() {
        return Err(AppError::Row {
            line,
            message: format!("expected 5 columns, found {}", rec.len()),
        });
    }
    let uid: u32 = field(rec, 0, line)?;
    let day: i64 = field(rec, 1, line)?;
    let slot: i64 = field(rec, 2, line)?;
    let x: i64 = field(rec, 3, line)?;
    let y: i64 = field(rec, 4, line)?;
    let side = grid.side() as i64;
    let check = |name: &str, v: i64, lo: i64, hi: i64| {
        if (lo..=hi).contains(&v) {
            Ok(())
        } else {
            Err(AppError::Row {
                line,
                message: format!("{name} = {v} outside [{lo}, {hi}]"),
            })
        }
    };
    check("d", day, 0, NUM_DAYS as i64 - 1)?;
    check("t", slot, 0, SLOTS_PER_DAY as i64 - 1)?;
    check("x", x, 1, side)?;
    check("y", y, 1, side)?;
    Ok(Record {
        uid,
        day: day as u16,
        slot: slot as u8,
        cell: GridCell::new((x - 1) as u16, (y - 1) as u16),
    })
}

/// Reads a city file into per-user trajectories sorted by `(day, slot)`,
/// keeping the first row of any duplicated `(uid, day, slot)`.
pub fn load_city(path: &Path, grid: Grid) -> AppResult<Vec<UserTrajectory>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| AppError::csv(path, e))?.clone();
    if headers.iter().map(str::trim).ne(HEADER) {
        return Err(AppError::Row {
            line: 1,
            message: format!("header must be {}, found {}", HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| AppError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        records.push(parse_row(&row, line, grid)?);
    }
    Ok(group_by_user(records))
}

/// Writes records in file convention (1-based coordinates).
pub fn write_city(path: &Path, records: &[Record]) -> AppResult<()> {
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(HEADER).map_err(|e| AppError::csv(path, e))?;
    for r in records {
        w.write_record(&[
            r.uid.to_string(),
            r.day.to_string(),
            r.slot.to_string(),
            (r.cell.x + 1).to_string(),
            (r.cell.y + 1).to_string(),
        ])
        .map_err(|e| AppError::csv(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Generator settings readable from a key=value params file.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("epsilon", "probability that a recorded slot is a random excursion"),
    ("excursion_radius", "excursion cells lie within this Chebyshev radius of the scheduled cell (0 = anywhere)"),
    ("presence_day", "recording probability 08:00-18:00"),
    ("presence_night", "recording probability outside 08:00-18:00"),
    ("weekend_presence", "multiplier on recording probability at weekends"),
    ("max_leisure", "maximum number of weekend leisure places per user"),
    ("geography", "home/work layout: central or shifted"),
    ("days", "number of generated days (at most 75)"),
    ("day0_weekday", "weekday of day 0 (0 = Monday)"),
    ("first_uid", "uid of the first generated user"),
];

pub fn geography_name(g: Geography) -> &'static str {
    if g == Geography::SHIFTED {
        "shifted"
    } else {
        "central"
    }
}

pub fn set_synth_param(p: &mut SynthParams, key: &str, value: &str) -> AppResult<()> {
    let bad = || AppError::Usage(format!("invalid value {value:?} for generator key {key}"));
    let v = value.trim();
    match key {
        "epsilon" => p.epsilon = v.parse().map_err(|_| bad())?,
        "excursion_radius" => p.excursion_radius = v.parse().map_err(|_| bad())?,
        "presence_day" => p.presence_day = v.parse().map_err(|_| bad())?,
        "presence_night" => p.presence_night = v.parse().map_err(|_| bad())?,
        "weekend_presence" => p.weekend_presence = v.parse().map_err(|_| bad())?,
        "max_leisure" => p.max_leisure = v.parse().map_err(|_| bad())?,
        "geography" => {
            p.geography = match v {
                "central" => Geography::CENTRAL,
                "shifted" => Geography::SHIFTED,
                _ => return Err(bad()),
            }
        }
        "days" => p.days = v.parse().map_err(|_| bad())?,
        "day0_weekday" => {
            p.calendar = Calendar {
                day0_weekday: v.parse().map_err(|_| bad())?,
            }
        }
        "first_uid" => p.first_uid = v.parse().map_err(|_| bad())?,
        _ => return Err(AppError::Usage(format!("unknown generator key {key:?}"))),
    }
    Ok(())
}

pub fn synth_pairs(p: &SynthParams) -> Vec<(&'static str, String)> {
    vec![
        ("epsilon", format!("{:?}", p.epsilon)),
        ("excursion_radius", p.excursion_radius.to_string()),
        ("presence_day", format!("{:?}", p.presence_day)),
        ("presence_night", format!("{:?}", p.presence_night)),
        ("weekend_presence", format!("{:?}", p.weekend_presence)),
        ("max_leisure", p.max_leisure.to_string()),
        ("geography", geography_name(p.geography).to_string()),
        ("days", p.days.to_string()),
        ("day0_weekday", p.calendar.day0_weekday.to_string()),
        ("first_uid", p.first_uid.to_string()),
    ]
}

/// Sidecar path for a generated city: `<file>.params`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".params");
    PathBuf::from(s)
}

/// Generates a city, writes it and its sidecar. Returns the records.
pub fn generate(out: &Path, users: usize, grid: Grid, seed: u64, params: &SynthParams) -> AppResult<Vec<Record>> {
    let records = synthesize_city(users, grid, seed, params)?;
    write_city(out, &records)?;
    let side = sidecar_path(out);
    let mut text = format!("seed={seed}\nusers={users}\ngrid={}\n", grid.side());
    for (k, v) in synth_pairs(params) {
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut f = File::create(&side).map_err(|e| AppError::io(&side, e))?;
    f.write_all(text.as_bytes()).map_err(|e| AppError::io(&side, e))?;
    Ok(records)
}
