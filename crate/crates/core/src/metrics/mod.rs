//! Image quality metrics on 8-bit images and their batch reports.

mod psnr;
mod ssim;
mod uiqm;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::ImageRecord;
use crate::error::{Error, Result};

pub use psnr::{mse, psnr, PSNR_CAP_DB};
pub use ssim::{luma, ssim, ssim_plane, SsimWindow, C1, C2};
pub use uiqm::{
    uicm, uiconm, uiqm, uiqm_parts, uism, UiqmParts, UICM_WEIGHT, UICONM_WEIGHT, UISM_WEIGHT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
    Uiqm,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Uiqm];

    pub fn column(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr_db",
            Metric::Ssim => "ssim",
            Metric::Uiqm => "uiqm",
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, Metric::Uiqm)
    }

    /// Parses a comma-separated list such as `psnr,ssim`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = match part {
                "psnr" => Metric::Psnr,
                "ssim" => Metric::Ssim,
                "uiqm" => Metric::Uiqm,
                other => {
                    return Err(Error::invalid(
                        "metrics",
                        format!("unknown metric `{other}`"),
                    ))
                }
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("metrics", "no metrics selected"));
        }
        out.sort();
        Ok(out)
    }
}

/// Scores of one image, in the order of [`MetricsReport::metrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single row.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Aggregate { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<Metric>,
    /// Sorted by id.
    pub rows: Vec<MetricsRow>,
    pub aggregate: Vec<Aggregate>,
}

/// An image to score, with its reference for full-reference metrics.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub candidate: &'a ImageRecord,
    pub reference: Option<&'a ImageRecord>,
}

fn score(item: &Scored<'_>, metrics: &[Metric]) -> Result<MetricsRow> {
    let values = metrics
        .iter()
        .map(|m| {
            let reference = || {
                item.reference.ok_or_else(|| {
                    Error::invalid(
                        "batch_report",
                        format!("`{}` has no reference image", item.candidate.id),
                    )
                })
            };
            match m {
                Metric::Psnr => psnr(item.candidate, reference()?),
                Metric::Ssim => ssim(item.candidate, reference()?, SsimWindow::default()),
                Metric::Uiqm => uiqm(item.candidate),
            }
        })
        .collect::<Result<_>>()?;
    Ok(MetricsRow {
        id: item.candidate.id.clone(),
        values,
    })
}

/// Scores every item (in parallel), sorts rows by id, and aggregates.
pub fn batch_report(items: &[Scored<'_>], metrics: &[Metric]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::invalid("batch_report", "no images to score"));
    }
    if metrics.is_empty() {
        return Err(Error::invalid("batch_report", "no metrics selected"));
    }
    let mut rows = items
        .par_iter()
        .map(|it| score(it, metrics))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    MetricsReport::from_rows(metrics.to_vec(), rows)
}

impl MetricsReport {
    pub fn from_rows(metrics: Vec<Metric>, rows: Vec<MetricsRow>) -> Result<MetricsReport> {
        if rows.is_empty() {
            return Err(Error::invalid("batch_report", "no rows"));
        }
        if rows.iter().any(|r| r.values.len() != metrics.len()) {
            return Err(Error::invalid(
                "batch_report",
                "row width differs from metric list",
            ));
        }
        let aggregate = (0..metrics.len())
            .map(|k| Aggregate::of(&rows.iter().map(|r| r.values[k]).collect::<Vec<_>>()))
            .collect();
        Ok(MetricsReport {
            metrics,
            rows,
            aggregate,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<Aggregate> {
        self.metrics
            .iter()
            .position(|&m| m == metric)
            .map(|i| self.aggregate[i])
    }

    pub fn column(&self, metric: Metric) -> Option<Vec<f64>> {
        let i = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    /// `id,<metric columns>` then one row per image and `MEAN`/`STD` rows,
    /// six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m.column());
        }
        out.push('\n');
        let mut line = |label: &str, values: &mut dyn Iterator<Item = f64>| {
            out.push_str(label);
            for v in values {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, &mut r.values.iter().copied());
        }
        line("MEAN", &mut self.aggregate.iter().map(|a| a.mean));
        line("STD", &mut self.aggregate.iter().map(|a| a.std));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_of_two() {
        let a = Aggregate::of(&[10.0, 20.0]);
        assert_eq!(a.mean, 15.0);
        assert!((a.std - 7.0710678118654755).abs() < 1e-12);
        assert_eq!(Aggregate::of(&[3.0]).std, 0.0);
    }

    #[test]
    fn csv_layout_and_sorting() {
        let b = ImageRecord::new("b", 3, 8, 8, vec![10; 192]).unwrap();
        let a = ImageRecord::new("a", 3, 8, 8, vec![20; 192]).unwrap();
        let r = ImageRecord::new("r", 3, 8, 8, vec![11; 192]).unwrap();
        let items = [
            Scored {
                candidate: &b,
                reference: Some(&r),
            },
            Scored {
                candidate: &a,
                reference: Some(&r),
            },
        ];
        let report = batch_report(&items, &[Metric::Psnr]).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,psnr_db");
        assert!(lines[1].starts_with("a,") && lines[2].starts_with("b,"));
        assert_eq!(lines[3].split(',').next(), Some("MEAN"));
        assert_eq!(lines[4].split(',').next(), Some("STD"));
        assert_eq!(lines[2], "b,48.130804");
        let again = batch_report(&items, &[Metric::Psnr]).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            Metric::parse_list("uiqm,psnr").unwrap(),
            vec![Metric::Psnr, Metric::Uiqm]
        );
        assert!(Metric::parse_list("lpips").is_err());
        assert!(batch_report(&[], &Metric::ALL).is_err());
    }
}
