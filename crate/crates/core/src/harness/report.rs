use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, Method, Scenario};
use crate::model::Model;

pub const SCHEMA_VERSION: u32 = 1;

/// One (corruption, ratio, method, repeat) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub scenario: Scenario,
    /// Corruption label, `none` outside corruption grids.
    pub corruption: String,
    /// Absent for the baseline, which uses no adaptation data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub adapt_samples: usize,
    pub eval_samples: usize,
    /// Mean PSNR of the evaluated split against its uncorrupted version.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_psnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f32>,
    pub params_checksum_before: String,
    pub params_checksum_after: String,
    pub bn_checksum_before: String,
    pub bn_checksum_after: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_input_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt_checksum: Option<String>,
    pub eval_checksum: String,
    /// Excluded from determinism comparisons.
    pub wall_ms: u64,
}

impl CellRecord {
    pub(crate) fn new(
        scenario: Scenario,
        corruption: &str,
        ratio: Option<f64>,
        method: Method,
        repeat: usize,
        seed: u64,
        model: &Model,
    ) -> Self {
        CellRecord {
            scenario,
            corruption: corruption.to_string(),
            ratio,
            method,
            repeat,
            seed,
            accuracy: None,
            failure: None,
            adapt_samples: 0,
            eval_samples: 0,
            target_psnr_db: None,
            selected_fraction: None,
            final_loss: None,
            params_checksum_before: model.params_checksum(),
            params_checksum_after: String::new(),
            bn_checksum_before: model.bn_checksum(),
            bn_checksum_after: String::new(),
            meta_input_checksum: None,
            adapt_checksum: None,
            eval_checksum: String::new(),
            wall_ms: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub scenario: Scenario,
    pub seed: u64,
    /// Which dataset substitution stands in for a real domain pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitution: Option<String>,
    pub model_params_checksum: String,
    pub model_bn_checksum: String,
    /// Effective configuration, echoed for provenance.
    pub config: ExperimentConfig,
    #[serde(default)]
    pub cells: Vec<CellRecord>,
}

impl ExperimentReport {
    /// Copy with every wall-time field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.cells.iter_mut().for_each(|c| c.wall_ms = 0);
        r
    }

    pub fn cells_for(&self, method: Method) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(move |c| c.method == method)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.failure.is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Structured,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table-text" | "table" | "text" => Ok(ReportFormat::TableText),
            "structured" | "toml" => Ok(ReportFormat::Structured),
            other => Err(Error::Usage(format!(
                "render_report: unknown format `{other}` (expected table-text or structured)"
            ))),
        }
    }
}

/// `0.01` → `1%`, `0.005` → `0.5%`.
pub fn ratio_label(r: f64) -> String {
    let pct = (r * 100.0 * 1e6).round() / 1e6;
    format!("{pct}%")
}

fn accuracy_text(cells: &[&CellRecord]) -> String {
    if cells.is_empty() {
        return "-".into();
    }
    let ok: Vec<f64> = cells.iter().filter_map(|c| c.accuracy).collect();
    if ok.len() < cells.len() {
        return "FAIL".into();
    }
    format!("{:.2}", ok.iter().sum::<f64>() / ok.len() as f64)
}

fn table(report: &ExperimentReport) -> String {
    let mut groups: Vec<&str> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    let mut ratios: Vec<f64> = Vec::new();
    for c in &report.cells {
        if !groups.contains(&c.corruption.as_str()) {
            groups.push(&c.corruption);
        }
        if c.method != Method::Baseline && !methods.contains(&c.method) {
            methods.push(c.method);
        }
        if let Some(r) = c.ratio {
            if !ratios.contains(&r) {
                ratios.push(r);
            }
        }
    }
    let mut columns: Vec<(&str, Option<Method>)> = Vec::new();
    for &g in &groups {
        if methods.is_empty() {
            columns.push((g, None));
        }
        for &m in &methods {
            columns.push((g, Some(m)));
        }
    }
    let heading = |(g, m): &(&str, Option<Method>)| {
        let m = m.map_or("accuracy", Method::name);
        if groups.len() > 1 || *g != "none" {
            format!("{g} / {m}")
        } else {
            m.to_string()
        }
    };
    let mut out = format!("{} ({:?}), accuracy %\n", report.name, report.scenario);
    if let Some(s) = &report.substitution {
        let _ = writeln!(out, "target: {s}");
    }
    out.push_str("| Ratio |");
    for c in &columns {
        let _ = write!(out, " {} |", heading(c));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    if report.cells.is_empty() {
        return out;
    }
    out.push_str("| Baseline |");
    for (g, _) in &columns {
        let cells: Vec<&CellRecord> = report
            .cells
            .iter()
            .filter(|c| c.method == Method::Baseline && c.corruption == *g)
            .collect();
        let _ = write!(out, " {} |", accuracy_text(&cells));
    }
    out.push('\n');
    for &r in &ratios {
        let _ = write!(out, "| {} |", ratio_label(r));
        for (g, m) in &columns {
            let cells: Vec<&CellRecord> = report
                .cells
                .iter()
                .filter(|c| Some(c.method) == *m && c.corruption == *g && c.ratio == Some(r))
                .collect();
            let _ = write!(out, " {} |", accuracy_text(&cells));
        }
        out.push('\n');
    }
    out
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::TableText => Ok(table(report)),
        ReportFormat::Structured => toml::to_string(report).map_err(|e| Error::Format {
            what: "report",
            offset: 0,
            msg: e.to_string(),
        }),
    }
}

pub fn parse_report(text: &str) -> Result<ExperimentReport> {
    let report: ExperimentReport = toml::from_str(text).map_err(|e| Error::Format {
        what: "report",
        offset: e.span().map_or(0, |s| s.start as u64),
        msg: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Version {
            what: "report",
            found: report.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(report)
}
