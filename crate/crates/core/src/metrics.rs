//! Metrics log (JSON Lines), accuracy table and SVG accuracy curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::RoundRecord;

/// Append-only JSON Lines writer, flushed after every record.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Creates (truncating) the log at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn write(&mut self, record: &RoundRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics log. Empty input and malformed lines are errors that
/// carry the 1-based line number.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RoundRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.test_accuracy) {
            return Err(Error::Schema {
                line: i + 1,
                message: format!("test_accuracy {} outside [0, 1]", record.test_accuracy),
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "metrics log is empty".into(),
        });
    }
    Ok(records)
}

/// Accuracy statistics of one round across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub labeled_count: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

pub fn summarize(records: &[RoundRecord]) -> Vec<RoundSummary> {
    let mut by_round: BTreeMap<usize, Vec<&RoundRecord>> = BTreeMap::new();
    for r in records {
        by_round.entry(r.round).or_default().push(r);
    }
    by_round
        .into_iter()
        .map(|(round, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.test_accuracy).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.test_accuracy - mean).powi(2)).sum::<f64>() / n;
            RoundSummary {
                round,
                labeled_count: rs.iter().map(|r| r.labeled_count as f64).sum::<f64>() / n,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                seeds: rs.len(),
            }
        })
        .collect()
}

/// Plain-text accuracy-vs-labels table, one row per round.
pub fn report_table(records: &[RoundRecord]) -> String {
    let mut out = String::from("round  labeled  accuracy  std     seeds\n");
    for s in summarize(records) {
        let _ = writeln!(
            out,
            "{:>5}  {:>7}  {:>8.4}  {:>6.4}  {:>5}",
            s.round,
            format!("{:.0}", s.labeled_count),
            s.mean_accuracy,
            s.std_accuracy,
            s.seeds
        );
    }
    out
}

/// SVG line chart of mean test accuracy against labeled count.
pub fn svg_chart(records: &[RoundRecord]) -> String {
    let rows = summarize(records);
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.labeled_count).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| pad + (x - x_min) / x_span * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    for tick in 0..=5 {
        let y = tick as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="11" text-anchor="end">{v:.1}</text>"#,
            x = pad - 6.0,
            y = py(y) + 4.0,
            v = y
        );
    }
    for r in &rows {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-size="11" text-anchor="middle">{v:.0}</text>"#,
            x = px(r.labeled_count),
            y = h - pad + 16.0,
            v = r.labeled_count
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">labeled samples</text>"#,
        x = w / 2.0,
        y = h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {y})">test accuracy</text>"#,
        y = h / 2.0
    );
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.labeled_count), py(r.mean_accuracy)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        points.join(" ")
    );
    for r in &rows {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            px(r.labeled_count),
            py(r.mean_accuracy)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, round: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            seed,
            round,
            labeled_count: 20 + 10 * round,
            test_accuracy: acc,
            query_indices: vec![round],
            uncertainty: vec![0.5],
            diversity: vec![0.25],
            train_seconds: None,
            query_seconds: None,
        }
    }

    #[test]
    fn jsonl_round_trip_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        let recs: Vec<_> = (0..5).map(|r| record(1, r, 0.5 + 0.1 * r as f64 / 2.0)).collect();
        for r in &recs {
            w.write(r).unwrap();
        }
        assert_eq!(read_metrics(&path).unwrap(), recs);
        let table = report_table(&recs);
        assert_eq!(table.lines().count(), 6);
        let svg = svg_chart(&recs);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn malformed_and_empty_logs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, format!("{}\nnot json\n", serde_json::to_string(&record(0, 0, 0.5)).unwrap())).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn summary_averages_seeds() {
        let recs = vec![record(0, 0, 0.4), record(1, 0, 0.6), record(0, 1, 0.8)];
        let s = summarize(&recs);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_accuracy - 0.5).abs() < 1e-12);
        assert!((s[0].std_accuracy - 0.1).abs() < 1e-12);
        assert_eq!(s[1].seeds, 1);
    }
}
