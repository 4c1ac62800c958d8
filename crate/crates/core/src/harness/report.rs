//! Comparison tables: one row per method, one column per generator, then
//! the average.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ImageRecord, ScoreTable};
use crate::metrics::{aggregate, evaluate_by_generator, percent, EvalReport, FamilyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLayout {
    TableCsv,
    Json,
    Markdown,
}

impl FromStr for ReportLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table_csv" | "csv" => Ok(ReportLayout::TableCsv),
            "json" => Ok(ReportLayout::Json),
            "markdown" | "md" => Ok(ReportLayout::Markdown),
            other => Err(Error::Config(format!("unknown report layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMetric {
    Auc,
    Ap,
    Accuracy,
}

impl FromStr for TableMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(TableMetric::Auc),
            "ap" => Ok(TableMetric::Ap),
            "accuracy" | "acc" => Ok(TableMetric::Accuracy),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// A named row source: an internal evaluation or imported external scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub report: EvalReport,
}

/// Evaluates an imported score table on the manifest records it covers.
pub fn method_from_scores(
    table: &ScoreTable,
    manifest: &DatasetManifest,
    threshold: f64,
    families: &FamilyMap,
) -> Result<MethodReport> {
    let scored: Vec<(f64, &ImageRecord)> =
        manifest.records().iter().filter_map(|r| table.entries.get(&r.id).map(|&s| (s, r))).collect();
    let run = evaluate_by_generator(&scored, threshold)?;
    Ok(MethodReport { method: table.method_name.clone(), report: aggregate(&[run], families)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub metric: TableMetric,
    pub generators: Vec<String>,
    /// Method name, one cell per generator (absent when not evaluated), average.
    pub rows: Vec<(String, Vec<Option<f64>>, f64)>,
}

/// Columns follow the family map's order; `AVG` is the mean of a row's entries.
pub fn build_table(methods: &[MethodReport], metric: TableMetric, families: &FamilyMap) -> Result<Table> {
    if methods.is_empty() {
        return Err(Error::Empty("report needs at least one method"));
    }
    let names: BTreeSet<&str> =
        methods.iter().flat_map(|m| m.report.per_generator.keys().map(String::as_str)).collect();
    let generators: Vec<String> = families.sort_generators(names).into_iter().map(str::to_string).collect();
    let rows = methods
        .iter()
        .map(|m| {
            let cells: Vec<Option<f64>> = generators
                .iter()
                .map(|g| {
                    m.report.per_generator.get(g).map(|s| match metric {
                        TableMetric::Auc => s.auc.mean,
                        TableMetric::Ap => s.ap.mean,
                        TableMetric::Accuracy => s.accuracy.mean,
                    })
                })
                .collect();
            let present: Vec<f64> = cells.iter().flatten().copied().collect();
            let avg = present.iter().sum::<f64>() / present.len() as f64;
            (m.method.clone(), cells, avg)
        })
        .collect();
    Ok(Table { metric, generators, rows })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), percent)
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{},AVG\n", self.generators.join(","));
        for (name, cells, avg) in &self.rows {
            let body: Vec<String> = cells.iter().map(|&c| cell(c)).collect();
            out.push_str(&format!("{name},{},{}\n", body.join(","), percent(*avg)));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| method | {} | AVG |\n", self.generators.join(" | "));
        out.push_str(&format!("|---|{}---|\n", "---|".repeat(self.generators.len())));
        for (name, cells, avg) in &self.rows {
            let body: Vec<String> = cells.iter().map(|&c| cell(c)).collect();
            out.push_str(&format!("| {name} | {} | {} |\n", body.join(" | "), percent(*avg)));
        }
        out
    }
}

/// Writes the reports to `path` in the chosen layout.
pub fn emit_report(
    methods: &[MethodReport],
    layout: ReportLayout,
    metric: TableMetric,
    families: &FamilyMap,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = match layout {
        ReportLayout::Json => {
            if methods.is_empty() {
                return Err(Error::Empty("report needs at least one method"));
            }
            serde_json::to_string_pretty(methods)?
        }
        ReportLayout::TableCsv => build_table(methods, metric, families)?.to_csv(),
        ReportLayout::Markdown => build_table(methods, metric, families)?.to_markdown(),
    };
    std::fs::write(path, text)?;
    Ok(())
}
