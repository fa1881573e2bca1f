//! Report rendering in markdown, long-format CSV and JSON.
//!
//! The CSV form is the JSON document flattened to one row per node:
//! `section,path,value` where `path` is a JSON pointer below the top-level
//! `section` and `value` is the node as JSON text (`{}` / `[]` for
//! containers). [`csv_to_json`] rebuilds the JSON document exactly.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::metrics::{AggregateStat, EvalReport, GatingResult};
use super::HarnessError;
use crate::explain::ExplainMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Md,
    Csv,
    Json,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Md, ReportFormat::Csv, ReportFormat::Json];

    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Md => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(HarnessError::Config(format!(
                "unknown report format `{other}`"
            ))),
        }
    }
}

/// Gating outcome for one seed. `threshold` is absent when the chosen rule
/// always uses the injected model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingSummary {
    pub seed: u64,
    pub threshold: Option<f64>,
    pub holdout_accuracy: f64,
    pub holdout_baseline_accuracy: f64,
    pub holdout_injected_accuracy: f64,
    pub test_accuracy: f64,
}

impl GatingSummary {
    pub fn new(seed: u64, g: &GatingResult) -> Self {
        Self {
            seed,
            threshold: g.threshold.is_finite().then_some(g.threshold),
            holdout_accuracy: g.holdout_accuracy,
            holdout_baseline_accuracy: g.holdout_baseline_accuracy,
            holdout_injected_accuracy: g.holdout_injected_accuracy,
            test_accuracy: g.test_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    /// Training seed of the model.
    pub seed: u64,
    pub method: ExplainMethod,
    /// Seed of the RANDOM ranking.
    pub control_seed: Option<u64>,
    pub fraction: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub label: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    pub model_checksum: String,
}

/// Everything a run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub span_method: String,
    pub link_mode: String,
    pub runs: Vec<EvalReport>,
    /// Label → metric → statistics over seeds.
    pub aggregates: IndexMap<String, IndexMap<String, AggregateStat>>,
    pub gating: Vec<GatingSummary>,
    pub perturbation: Vec<PerturbationRow>,
    pub training: Vec<TrainingSummary>,
}

impl RunSummary {
    /// Mean accuracy per (method, fraction) over all rows, in first-seen
    /// order.
    pub fn perturbation_means(&self) -> Vec<(ExplainMethod, f64, f64, usize)> {
        let mut acc: IndexMap<(ExplainMethod, u64), (f64, f64, usize)> = IndexMap::new();
        for r in &self.perturbation {
            let e = acc
                .entry((r.method, r.fraction.to_bits()))
                .or_insert((r.fraction, 0.0, 0));
            e.1 += r.accuracy;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|((m, _), (f, sum, n))| (m, f, sum / n as f64, n))
            .collect()
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn model_cells(r: &EvalReport) -> (String, String) {
    if r.metadata.injected {
        (r.metadata.span_method.clone(), r.metadata.link_mode.clone())
    } else {
        ("Question".to_string(), "-".to_string())
    }
}

fn table(out: &mut String, header: &[&str], rows: Vec<Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(
        out,
        "|{}",
        header.iter().map(|_| "---|").collect::<String>()
    );
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

pub const SPAN_TABLE_HEADER: &[&str] = &[
    "Model",
    "Type",
    "Seed",
    "Acc",
    "ents per Q",
    "eberts per Q",
    "Qs w/ eberts",
];
pub const AGGREGATE_TABLE_HEADER: &[&str] =
    &["Model", "Metric", "Mean", "Std", "Max", "Median", "Runs"];
pub const TYPE_TABLE_HEADER: &[&str] = &[
    "Model",
    "Type",
    "Seed",
    "Question type",
    "Percent with",
    "Acc",
    "Conf",
];
pub const EXPLAIN_TABLE_HEADER: &[&str] = &[
    "Model",
    "Type",
    "Seed",
    "Explainer",
    "top1",
    "top5",
    "top10",
    "Acc",
    "Qs",
    "Qs w/ EBERT",
];
pub const GATING_TABLE_HEADER: &[&str] = &[
    "Seed",
    "Threshold",
    "Holdout gated",
    "Holdout baseline",
    "Holdout injected",
    "Test gated",
];
pub const PERTURBATION_TABLE_HEADER: &[&str] = &["Explainer", "Fraction masked", "Acc", "Runs"];

/// Markdown tables: accuracy with span statistics, accuracy over seeds,
/// per-question-type accuracy and confidence, explainer entity rates,
/// gating and perturbation curves. Accuracies and rates are percentages.
pub fn render_markdown(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run report\n");
    let _ = writeln!(
        out,
        "Span method `{}`, link mode `{}`.\n",
        s.span_method, s.link_mode
    );

    let _ = writeln!(out, "## Accuracy and entity spans\n");
    let rows = s
        .runs
        .iter()
        .map(|r| {
            let (m, t) = model_cells(r);
            let st = &r.span_stats;
            let (e, b, q) = if r.metadata.injected {
                (
                    format!("{:.2}", st.ents_per_q),
                    format!("{:.2}", st.eberts_per_q),
                    format!("{:.2}", st.frac_q_with_eberts),
                )
            } else {
                ("-".into(), "-".into(), "-".into())
            };
            vec![
                m,
                t,
                r.metadata.seed.to_string(),
                pct(r.overall_accuracy),
                e,
                b,
                q,
            ]
        })
        .collect();
    table(&mut out, SPAN_TABLE_HEADER, rows);

    let _ = writeln!(out, "## Results over seeds\n");
    let mut rows = Vec::new();
    for (label, metrics) in &s.aggregates {
        for (metric, a) in metrics {
            let scale = |v: f64| {
                if metric.ends_with("logit") {
                    format!("{v:.2}")
                } else {
                    pct(v)
                }
            };
            let std = if a.std_defined {
                scale(a.std)
            } else {
                "-".to_string()
            };
            rows.push(vec![
                label.clone(),
                metric.clone(),
                scale(a.mean),
                std,
                scale(a.max),
                scale(a.median),
                a.n.to_string(),
            ]);
        }
    }
    table(&mut out, AGGREGATE_TABLE_HEADER, rows);

    let _ = writeln!(out, "## Accuracy and confidence by question type\n");
    let mut rows = Vec::new();
    for r in &s.runs {
        let (m, t) = model_cells(r);
        for (qt, ts) in &r.per_type {
            rows.push(vec![
                m.clone(),
                t.clone(),
                r.metadata.seed.to_string(),
                qt.clone(),
                pct(ts.fraction_of_questions),
                pct(ts.accuracy),
                format!("{:.2}", ts.mean_top1_logit),
            ]);
        }
        rows.push(vec![
            m,
            t,
            r.metadata.seed.to_string(),
            "all".into(),
            pct(1.0),
            pct(r.overall_accuracy),
            format!("{:.2}", r.mean_top1_logit),
        ]);
    }
    table(&mut out, TYPE_TABLE_HEADER, rows);

    let _ = writeln!(out, "## Injected entities among the most relevant tokens\n");
    let _ = writeln!(
        out,
        "top-k: percent of questions with an injected entity in the k most relevant tokens. \
         Acc: accuracy on those with one in the top 5. Qs w/ EBERT: fraction of questions with an injected entity.\n"
    );
    let mut rows = Vec::new();
    for r in &s.runs {
        let (m, t) = model_cells(r);
        for (method, e) in &r.explanation_stats {
            rows.push(vec![
                m.clone(),
                t.clone(),
                r.metadata.seed.to_string(),
                method.clone(),
                pct(e.entity_in_top1),
                pct(e.entity_in_top5),
                pct(e.entity_in_top10),
                e.accuracy_given_entity_in_top5.map_or("-".into(), pct),
                pct(e.fraction_questions_entity_in_top5),
                format!("{:.2}", r.span_stats.frac_q_with_eberts),
            ]);
        }
    }
    table(&mut out, EXPLAIN_TABLE_HEADER, rows);

    let _ = writeln!(out, "## Confidence-gated injection\n");
    let rows = s
        .gating
        .iter()
        .map(|g| {
            vec![
                g.seed.to_string(),
                g.threshold.map_or("-inf".into(), |t| format!("{t:.4}")),
                pct(g.holdout_accuracy),
                pct(g.holdout_baseline_accuracy),
                pct(g.holdout_injected_accuracy),
                pct(g.test_accuracy),
            ]
        })
        .collect();
    table(&mut out, GATING_TABLE_HEADER, rows);

    let _ = writeln!(out, "## Perturbation\n");
    let rows = s
        .perturbation_means()
        .into_iter()
        .map(|(m, f, a, n)| vec![m.to_string(), format!("{f:.2}"), pct(a), n.to_string()])
        .collect();
    table(&mut out, PERTURBATION_TABLE_HEADER, rows);
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}

pub fn render_json(s: &RunSummary) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(s)? + "\n")
}

fn escape_pointer(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn unescape_pointer(token: &str) -> String {
    token.replace("~1", "/").replace("~0", "~")
}

fn flatten(
    section: &str,
    path: &str,
    v: &Value,
    rows: &mut Vec<[String; 3]>,
) -> Result<(), HarnessError> {
    let text = match v {
        Value::Object(_) => "{}".to_string(),
        Value::Array(_) => "[]".to_string(),
        scalar => serde_json::to_string(scalar)?,
    };
    rows.push([section.to_string(), path.to_string(), text]);
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(
                    section,
                    &format!("{path}/{}", escape_pointer(k)),
                    child,
                    rows,
                )?;
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(section, &format!("{path}/{i}"), child, rows)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// The summary as `section,path,value` rows.
pub fn render_csv(s: &RunSummary) -> Result<String, HarnessError> {
    let doc = serde_json::to_value(s)?;
    let Value::Object(top) = doc else {
        return Err(HarnessError::Csv("summary is not a JSON object".into()));
    };
    let mut rows = Vec::new();
    for (section, v) in &top {
        flatten(section, "", v, &mut rows)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["section", "path", "value"])?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Csv(e.to_string()))
}

fn child<'a>(node: &'a mut Value, token: &str) -> Result<&'a mut Value, HarnessError> {
    let missing = || HarnessError::Csv(format!("dangling path segment `{token}`"));
    match node {
        Value::Object(map) => map.get_mut(token).ok_or_else(missing),
        Value::Array(items) => {
            let i: usize = token.parse().map_err(|_| missing())?;
            items.get_mut(i).ok_or_else(missing)
        }
        _ => Err(missing()),
    }
}

/// Rebuilds the JSON document from [`render_csv`] output.
pub fn csv_to_json(text: &str) -> Result<Value, HarnessError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["section", "path", "value"] {
        return Err(HarnessError::Csv(format!("unexpected header {headers:?}")));
    }
    let mut root = Value::Object(Map::new());
    for record in reader.records() {
        let record = record?;
        let (section, path, value) = (&record[0], &record[1], &record[2]);
        let node: Value = match value {
            "{}" => Value::Object(Map::new()),
            "[]" => Value::Array(Vec::new()),
            lit => serde_json::from_str(lit)?,
        };
        let mut tokens: Vec<String> = vec![section.to_string()];
        tokens.extend(path.split('/').skip(1).map(unescape_pointer));
        let (last, parents) = tokens.split_last().expect("section token");
        let mut parent = &mut root;
        for t in parents {
            parent = child(parent, t)?;
        }
        match parent {
            Value::Object(map) => {
                map.insert(last.clone(), node);
            }
            Value::Array(items) => {
                if last.parse::<usize>().ok() != Some(items.len()) {
                    return Err(HarnessError::Csv(format!(
                        "out-of-order array index `{last}`"
                    )));
                }
                items.push(node);
            }
            _ => return Err(HarnessError::Csv(format!("`{path}` has a scalar parent"))),
        }
    }
    Ok(root)
}

pub fn render(s: &RunSummary, format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Md => Ok(render_markdown(s)),
        ReportFormat::Csv => render_csv(s),
        ReportFormat::Json => render_json(s),
    }
}

/// Writes `report.<ext>` into `dir` and returns its path.
pub fn emit_report(
    s: &RunSummary,
    format: ReportFormat,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("report.{}", format.extension()));
    fs::write(&path, render(s, format)?)?;
    Ok(path)
}
