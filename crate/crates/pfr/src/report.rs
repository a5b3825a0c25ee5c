//! Evaluation reports as CSV and as a text table.
//!
//! CSV header: `name,psnr,ssim,lmse,id_percent,lpips,musiq`. PSNR is in dB,
//! LMSE in squared pixels, identity similarity in percent. The `lpips` and
//! `musiq` columns are reserved for user-supplied metrics and left empty.
//! The last row, named `mean`, holds the column averages.

use std::fmt::Write as _;
use std::path::Path;

use pfr_core::metrics::{MetricsReport, MetricsRow};
use serde::Serialize;

use crate::{Error, Result};

pub const HEADER: [&str; 7] = ["name", "psnr", "ssim", "lmse", "id_percent", "lpips", "musiq"];

#[derive(Serialize)]
struct CsvRow<'a> {
    name: &'a str,
    psnr: f64,
    ssim: f64,
    lmse: f64,
    id_percent: f64,
    lpips: Option<f64>,
    musiq: Option<f64>,
}

impl<'a> From<&'a MetricsRow> for CsvRow<'a> {
    fn from(r: &'a MetricsRow) -> Self {
        Self { name: &r.name, psnr: r.psnr, ssim: r.ssim, lmse: r.lmse, id_percent: r.id_percent, lpips: None, musiq: None }
    }
}

pub fn to_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in report.rows.iter().chain(std::iter::once(&report.mean)) {
        w.serialize(CsvRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, to_csv(report)?).map_err(|e| Error::io(path, e))
}

pub fn table(report: &MetricsReport) -> String {
    let width = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>8}  {:>6}  {:>8}  {:>7}", "name", "PSNR", "SSIM", "LMSE", "ID %");
    let _ = writeln!(s, "{}", "-".repeat(width + 39));
    for r in report.rows.iter().chain(std::iter::once(&report.mean)) {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.3}  {:>6.4}  {:>8.3}  {:>7.2}",
            r.name, r.psnr, r.ssim, r.lmse, r.id_percent
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_documented_header() {
        let row = MetricsRow { name: "a.png".into(), psnr: 30.0, ssim: 0.9, lmse: 1.5, id_percent: 80.0 };
        let report = MetricsReport { rows: vec![row.clone()], mean: MetricsRow { name: "mean".into(), ..row } };
        let csv = to_csv(&report).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "a.png,30.0,0.9,1.5,80.0,,");
        assert!(table(&report).contains("mean"));
    }
}
