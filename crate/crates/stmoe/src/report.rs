//! Evaluation reports, training logs and prediction exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stmoe_core::metrics::EvalReport;
use stmoe_core::mobility::{Grid, LocationClass, SequenceExample};
use stmoe_core::train::EpochSummary;

use crate::error::{AppError, AppResult};

pub const REPORT_HEADER: &str = "city,uid,day,accuracy,geo_bleu,dtw";
pub const REPORT_NOTE: &str =
    "# one row per forecast window; the uid=all row per city is the unweighted mean over its windows";
pub const LOG_HEADER: &str = "epoch,step,phase,loss,lr_base,lr_loc";
pub const ROUTING_HEADER: &str = "epoch,expert,top1_count";

fn f(x: f64) -> String {
    format!("{x:.6}")
}

/// `<report>.summary`, holding the single-line key=value summary.
pub fn summary_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".summary");
    PathBuf::from(s)
}

pub fn summary_line(city: &str, report: &EvalReport) -> String {
    format!(
        "city={city} windows={} accuracy={} geo_bleu={} dtw={}",
        report.windows.len(),
        f(report.accuracy),
        f(report.geo_bleu),
        f(report.dtw)
    )
}

pub fn report_text(city: &str, report: &EvalReport) -> String {
    let mut s = format!("{REPORT_NOTE}\n{REPORT_HEADER}\n");
    for w in &report.windows {
        s.push_str(&format!(
            "{city},{},{},{},{},{}\n",
            w.uid,
            w.day,
            f(w.accuracy),
            f(w.geo_bleu),
            f(w.dtw)
        ));
    }
    s.push_str(&format!(
        "{city},all,,{},{},{}\n",
        f(report.accuracy),
        f(report.geo_bleu),
        f(report.dtw)
    ));
    s
}

/// Writes the CSV report and its `.summary` sidecar.
pub fn write_report(path: &Path, city: &str, report: &EvalReport) -> AppResult<()> {
    std::fs::write(path, report_text(city, report)).map_err(|e| AppError::io(path, e))?;
    let side = summary_path(path);
    std::fs::write(&side, summary_line(city, report) + "\n").map_err(|e| AppError::io(&side, e))
}

/// Parses a summary line back into key/value pairs.
pub fn parse_summary(line: &str) -> Vec<(String, String)> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Predicted cells in city-file layout (`uid,d,t,x,y`), one row per
/// predicted slot.
pub fn write_predictions(path: &Path, grid: Grid, windows: &[SequenceExample], preds: &[Vec<u32>]) -> AppResult<()> {
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| AppError::io(path, e);
    writeln!(w, "{}", crate::data::HEADER.join(",")).map_err(io)?;
    for (ex, pred) in windows.iter().zip(preds) {
        for (&i, &class) in ex.loss_positions().iter().zip(pred) {
            let cell = grid.class_to_cell(LocationClass(class))?;
            writeln!(w, "{},{},{},{},{}", ex.uid, ex.day[i], ex.slot[i], cell.x + 1, cell.y + 1).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Per-epoch CSV logs of a training run. Reopening keeps rows of epochs up
/// to `keep_through` so a resumed run continues the same files.
pub struct TrainLogs {
    log: (PathBuf, BufWriter<File>),
    routing: (PathBuf, BufWriter<File>),
}

fn reopen(path: &Path, header: &str, keep_through: u32) -> AppResult<BufWriter<File>> {
    let mut kept = String::new();
    if keep_through > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let epoch: Option<u32> = line.split(',').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e <= keep_through) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "{header}\n{kept}").map_err(|e| AppError::io(path, e))?;
    w.flush().map_err(|e| AppError::io(path, e))?;
    Ok(w)
}

impl TrainLogs {
    pub fn open(dir: &Path, keep_through: u32) -> AppResult<Self> {
        let lp = dir.join("train_log.csv");
        let rp = dir.join("routing.csv");
        Ok(Self {
            log: (lp.clone(), reopen(&lp, LOG_HEADER, keep_through)?),
            routing: (rp.clone(), reopen(&rp, ROUTING_HEADER, keep_through)?),
        })
    }

    pub fn record(&mut self, s: &EpochSummary) -> AppResult<()> {
        let (p, w) = &mut self.log;
        writeln!(
            w,
            "{},{},{},{},{:?},{:?}",
            s.epoch,
            s.step,
            s.phase.as_str(),
            f(s.loss),
            s.lr_base,
            s.lr_loc
        )
        .and_then(|_| w.flush())
        .map_err(|e| AppError::io(p, e))?;
        let (p, w) = &mut self.routing;
        for (e, c) in s.expert_load.iter().enumerate() {
            writeln!(w, "{},{e},{c}", s.epoch).map_err(|err| AppError::io(p, err))?;
        }
        w.flush().map_err(|e| AppError::io(p, e))
    }
}
