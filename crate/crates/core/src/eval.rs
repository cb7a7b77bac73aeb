//! Automatic evaluation of reward functions: decomposition error against the
//! episodic return, the conditional reward gap between positive and
//! non-positive proxy labels, constant baselines, and CSV/JSON reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RewardModel;
use crate::stats;
use crate::synth::{self, GroundTruth, OracleReport};
use crate::traj::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_tag: String,
    pub l_ge_mse: f64,
    pub l_ge_mae: f64,
    pub mean_reward_positive: f64,
    pub mean_reward_nonpositive: f64,
    pub delta_r_li: f64,
    pub oracle: Option<OracleReport>,
}

/// `(mse, mae)` of `R - Σ_t r̂_t` over trajectories.
pub fn eval_decomposition(model: &RewardModel, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    for t in dataset.trajectories() {
        let e = t.global_return() - model.step_rewards(t)?.iter().sum::<f64>();
        se += e * e;
        ae += e.abs();
    }
    let n = dataset.len() as f64;
    Ok((se / n, ae / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalGap {
    pub mean_positive: f64,
    pub mean_nonpositive: f64,
    pub delta: f64,
}

/// Mean predicted reward on positive-labeled minus non-positive-labeled steps.
pub fn eval_delta_li(model: &RewardModel, dataset: &Dataset) -> Result<ConditionalGap> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in dataset.trajectories() {
        let r = model.step_rewards(t)?;
        for (s, v) in t.steps().iter().zip(r) {
            match s.mm_label {
                Some(true) => pos.push(v),
                Some(false) => neg.push(v),
                None => {}
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Degenerate("no positive-labeled steps".into()));
    }
    if neg.is_empty() {
        return Err(Error::Degenerate("no non-positive-labeled steps".into()));
    }
    let (mp, mn) = (stats::mean(&pos), stats::mean(&neg));
    Ok(ConditionalGap {
        mean_positive: mp,
        mean_nonpositive: mn,
        delta: mp - mn,
    })
}

pub fn evaluate(
    model: &RewardModel,
    dataset: &Dataset,
    truth: Option<&GroundTruth>,
    method_tag: &str,
) -> Result<EvalReport> {
    let (mse, mae) = eval_decomposition(model, dataset)?;
    let gap = eval_delta_li(model, dataset)?;
    let oracle = truth
        .map(|g| synth::oracle_eval(model, dataset, g))
        .transpose()?;
    Ok(EvalReport {
        method_tag: method_tag.to_string(),
        l_ge_mse: mse,
        l_ge_mae: mae,
        mean_reward_positive: gap.mean_positive,
        mean_reward_nonpositive: gap.mean_nonpositive,
        delta_r_li: gap.delta,
        oracle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mean,
    Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantBaseline {
    pub kind: BaselineKind,
    pub per_step_value: f64,
}

impl ConstantBaseline {
    pub fn model(&self) -> RewardModel {
        RewardModel::Constant(self.per_step_value)
    }
}

/// Resolution of the return grid used by the mode baseline: one decade below
/// the order of magnitude of the return range.
pub fn return_grid_step(returns: &[f64]) -> f64 {
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return 0.0;
    }
    10f64.powf(range.log10().floor() - 1.0)
}

/// Mean: average per-step return `R/T` over trajectories.
/// Mode: most frequent return on the grid (smallest on ties), divided by the mean horizon.
pub fn fit_constant_baseline(dataset: &Dataset, kind: BaselineKind) -> Result<ConstantBaseline> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_step_value = match kind {
        BaselineKind::Mean => stats::mean(
            &dataset
                .trajectories()
                .iter()
                .map(|t| t.global_return() / t.horizon() as f64)
                .collect::<Vec<_>>(),
        ),
        BaselineKind::Mode => {
            let returns: Vec<f64> = dataset
                .trajectories()
                .iter()
                .map(|t| t.global_return())
                .collect();
            let step = return_grid_step(&returns);
            let mode = if step == 0.0 {
                returns[0]
            } else {
                let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
                for r in &returns {
                    *counts.entry((r / step).round() as i64).or_default() += 1;
                }
                let best = counts.values().copied().max().unwrap_or(0);
                let cell = counts
                    .iter()
                    .find(|(_, &c)| c == best)
                    .map(|(&k, _)| k)
                    .unwrap_or(0);
                cell as f64 * step
            };
            mode / dataset.mean_horizon()
        }
    };
    Ok(ConstantBaseline {
        kind,
        per_step_value,
    })
}

pub const CSV_COLUMNS: [&str; 9] = [
    "method_tag",
    "l_ge_mse",
    "l_ge_mae",
    "mean_r_pos",
    "mean_r_nonpos",
    "delta_r_li",
    "oracle_pearson",
    "oracle_mse",
    "oracle_sign_agreement",
];

/// Marker written for every value of a method that has no evaluation.
pub const GAP_MARKER: &str = "NA";

/// A report-table row: the method tag and its evaluation, if one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method_tag: String,
    pub report: Option<EvalReport>,
}

impl From<EvalReport> for ReportRow {
    fn from(r: EvalReport) -> Self {
        ReportRow {
            method_tag: r.method_tag.clone(),
            report: Some(r),
        }
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_fields(row: &ReportRow) -> Vec<String> {
    let mut out = vec![row.method_tag.clone()];
    match &row.report {
        None => out.extend(std::iter::repeat_n(GAP_MARKER.to_string(), CSV_COLUMNS.len() - 1)),
        Some(r) => {
            out.extend(
                [
                    r.l_ge_mse,
                    r.l_ge_mae,
                    r.mean_reward_positive,
                    r.mean_reward_nonpositive,
                    r.delta_r_li,
                ]
                .map(num),
            );
            match &r.oracle {
                Some(o) => out.extend([o.pearson_r, o.per_step_mse, o.sign_agreement].map(num)),
                None => out.extend(std::iter::repeat_n(String::new(), 3)),
            }
        }
    }
    out
}

fn json_row(row: &ReportRow) -> serde_json::Value {
    let v = |x: f64| serde_json::json!(x);
    let mut m = serde_json::Map::new();
    m.insert("method_tag".into(), serde_json::json!(row.method_tag));
    let values: [Option<f64>; 8] = match &row.report {
        None => [None; 8],
        Some(r) => [
            Some(r.l_ge_mse),
            Some(r.l_ge_mae),
            Some(r.mean_reward_positive),
            Some(r.mean_reward_nonpositive),
            Some(r.delta_r_li),
            r.oracle.map(|o| o.pearson_r),
            r.oracle.map(|o| o.per_step_mse),
            r.oracle.map(|o| o.sign_agreement),
        ],
    };
    for (k, x) in CSV_COLUMNS[1..].iter().zip(values) {
        m.insert((*k).into(), x.map_or(serde_json::Value::Null, v));
    }
    serde_json::Value::Object(m)
}

/// Writes `<stem>.csv` and `<stem>.json` with one row per method in input order.
pub fn emit_table(rows: &[ReportRow], stem: impl AsRef<Path>, notes: &[&str]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("no report rows"));
    }
    let stem = stem.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for row in rows {
        w.write_record(csv_fields(row))?;
    }
    let csv_bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let json = serde_json::json!({
        "columns": CSV_COLUMNS,
        "rows": rows.iter().map(json_row).collect::<Vec<_>>(),
        "notes": notes,
    });
    fs::write(stem.with_extension("csv"), csv_bytes)?;
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&json)? + "\n",
    )?;
    Ok(())
}

pub fn emit_report(reports: &[EvalReport], stem: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<ReportRow> = reports.iter().cloned().map(ReportRow::from).collect();
    emit_table(&rows, stem, &[])
}
