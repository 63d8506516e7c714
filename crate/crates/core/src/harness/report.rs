use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::MetricsReport;
use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: [&str; 5] = ["schema_version", "adapter", "metric", "bin", "value"];
const CHANNEL_ROW: &str = "channel";
const ALL_BINS: &str = "all";

/// One `(adapter, metric, bin)` value; values are rounded to 4 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub adapter: String,
    pub metric: String,
    pub bin: String,
    pub value: f64,
}

fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().expect("formatted float parses")
}

fn row(adapter: &str, metric: &str, bin: &str, value: f64) -> CsvRow {
    CsvRow {
        adapter: adapter.to_string(),
        metric: metric.to_string(),
        bin: bin.to_string(),
        value: round4(value),
    }
}

impl MetricsReport {
    /// Rows in export order: adapters as configured, then the channel.
    pub fn rows(&self) -> Vec<CsvRow> {
        let mut out = Vec::new();
        for a in &self.adapters {
            out.push(row(&a.name, "prediction_accuracy", ALL_BINS, a.prediction_accuracy));
            out.push(row(&a.name, "throughput", ALL_BINS, a.throughput));
            out.push(row(&a.name, "throughput_vs_opt", ALL_BINS, a.throughput_vs_opt));
            out.push(row(&a.name, "finetunes", ALL_BINS, a.finetunes as f64));
            for b in &a.bins {
                out.push(row(&a.name, "frames", b.bin.label(), b.frames as f64));
                out.push(row(&a.name, "prediction_accuracy", b.bin.label(), b.prediction_accuracy));
                out.push(row(&a.name, "throughput", b.bin.label(), b.throughput));
            }
            for (i, w) in a.windowed_throughput.iter().enumerate() {
                out.push(row(&a.name, "windowed_throughput", &format!("w{i}"), *w));
            }
        }
        for (b, v) in &self.channel.mean_abs_delta_rssi {
            out.push(row(CHANNEL_ROW, "mean_abs_delta_rssi", b.label(), *v));
        }
        out.push(row(CHANNEL_ROW, "max_abs_delta_rssi", ALL_BINS, self.channel.max_abs_delta_rssi));
        out
    }
}

fn write_rows<W: std::io::Write>(rows: &[CsvRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_HEADER)?;
    let version = CSV_SCHEMA_VERSION.to_string();
    for r in rows {
        w.write_record([version.as_str(), &r.adapter, &r.metric, &r.bin, &format!("{:.4}", r.value)])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes the tabular subset of `report` to `path`.
pub fn export_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    export_rows(&report.rows(), path)
}

pub fn export_rows(rows: &[CsvRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(rows, std::io::BufWriter::new(file))
}

/// Parses CSV text produced by [`export_csv`].
pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::format(origin, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let version: u32 = rec[0]
            .parse()
            .map_err(|_| Error::format(origin, format!("bad schema version {:?}", &rec[0])))?;
        if version != CSV_SCHEMA_VERSION {
            return Err(Error::format(origin, format!("unsupported schema version {version}")));
        }
        let value: f64 = rec[4]
            .parse()
            .map_err(|_| Error::format(origin, format!("bad value {:?}", &rec[4])))?;
        rows.push(CsvRow {
            adapter: rec[1].to_string(),
            metric: rec[2].to_string(),
            bin: rec[3].to_string(),
            value,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// Mean of every `(adapter, metric, bin)` across reports, in first-seen order.
pub fn aggregate_rows(reports: &[Vec<CsvRow>]) -> Vec<CsvRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for rows in reports {
        for r in rows {
            let key = (r.adapter.clone(), r.metric.clone(), r.bin.clone());
            let i = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    sums.push((0.0, 0));
                    keys.len() - 1
                }
            };
            sums[i].0 += r.value;
            sums[i].1 += 1;
        }
    }
    keys.into_iter()
        .zip(sums)
        .map(|((adapter, metric, bin), (s, n))| row(&adapter, &metric, &bin, s / n as f64))
        .collect()
}

fn default_bin() -> String {
    ALL_BINS.to_string()
}

/// Threshold on one report value, used by `--check` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub adapter: String,
    pub metric: String,
    #[serde(default = "default_bin")]
    pub bin: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub check: Check,
    /// `None` when the report has no such row.
    pub value: Option<f64>,
    pub passed: bool,
}

pub fn evaluate_checks(rows: &[CsvRow], checks: &[Check]) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let value = rows
                .iter()
                .find(|r| r.adapter == c.adapter && r.metric == c.metric && r.bin == c.bin)
                .map(|r| r.value);
            let passed = value.is_some_and(|v| c.min.is_none_or(|m| v >= m) && c.max.is_none_or(|m| v <= m));
            CheckOutcome {
                check: c.clone(),
                value,
                passed,
            }
        })
        .collect()
}

/// Aggregation of several exported reports into one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("compare needs at least one input CSV".into()));
        }
        Ok(())
    }
}

/// Reads every input and averages matching rows.
pub fn compare_reports(config: &CompareConfig) -> Result<Vec<CsvRow>> {
    config.validate()?;
    let tables = config.inputs.iter().map(|p| read_csv(p)).collect::<Result<Vec<_>>>()?;
    let rows = aggregate_rows(&tables);
    if let Some(path) = &config.output_path {
        export_rows(&rows, path)?;
    }
    Ok(rows)
}
