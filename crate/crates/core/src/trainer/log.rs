use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const LOG_HEADER: &str = "epoch,step,gan_g_xy,gan_g_yx,cycle,combined_fg,combined_bg,attention_total,disc_x_fg,disc_x_bg,disc_y_fg,disc_y_bg,ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    /// 1-based.
    pub epoch: u64,
    /// 1-based global step.
    pub step: u64,
    pub report: LossReport,
    /// Wall-clock duration of the step.
    pub ms: u64,
}

impl TrainLogRow {
    /// Losses use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.epoch.to_string(), self.step.to_string()];
        cols.extend(self.report.values().iter().map(f64::to_string));
        cols.push(self.ms.to_string());
        cols.join(",")
    }

    pub fn parse(line: &str) -> Result<TrainLogRow> {
        let bad = |msg: &str| Error::invalid("train log", format!("{msg}: `{line}`"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 13 {
            return Err(bad("expected 13 columns"));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer"));
        let mut v = [0.0; 10];
        for (slot, s) in v.iter_mut().zip(&cols[2..12]) {
            *slot = s.parse().map_err(|_| bad("bad number"))?;
        }
        Ok(TrainLogRow {
            epoch: int(cols[0])?,
            step: int(cols[1])?,
            report: LossReport::from_values(v),
            ms: int(cols[12])?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::invalid(
            "train log",
            format!("{}: missing header", path.display()),
        ));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(TrainLogRow::parse)
        .collect()
}

/// Per-epoch mean of every loss column, in epoch order.
pub fn epoch_means(rows: &[TrainLogRow]) -> Vec<(u64, LossReport)> {
    let mut out: Vec<(u64, [f64; 10], usize)> = Vec::new();
    for r in rows {
        if out.last().map(|o| o.0) != Some(r.epoch) {
            out.push((r.epoch, [0.0; 10], 0));
        }
        let last = out.last_mut().expect("pushed above");
        for (acc, v) in last.1.iter_mut().zip(r.report.values()) {
            *acc += v;
        }
        last.2 += 1;
    }
    out.into_iter()
        .map(|(e, sums, n)| (e, LossReport::from_values(sums.map(|s| s / n as f64))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let row = TrainLogRow {
            epoch: 2,
            step: 35,
            report: LossReport {
                gan_g_xy: 0.1 + 0.2,
                cycle: 1.0 / 3.0,
                disc_y_bg: 1e-300,
                ..LossReport::default()
            },
            ms: 812,
        };
        let line = row.to_csv();
        assert_eq!(line.split(',').count(), LOG_HEADER.split(',').count());
        assert_eq!(TrainLogRow::parse(&line).unwrap(), row);
    }

    #[test]
    fn means_per_epoch() {
        let row = |epoch, cycle| TrainLogRow {
            epoch,
            step: 0,
            report: LossReport {
                cycle,
                ..LossReport::default()
            },
            ms: 0,
        };
        let m = epoch_means(&[row(1, 1.0), row(1, 3.0), row(2, 5.0)]);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].0, m[0].1.cycle), (1, 2.0));
        assert_eq!((m[1].0, m[1].1.cycle), (2, 5.0));
    }
}
