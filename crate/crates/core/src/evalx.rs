//! Evaluation, aggregation across seeds and report emission.
//!
//! Accuracies are fractions in `[0, 1]`. Standard deviations are population
//! standard deviations (divide by the number of seeds).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domains::LabeledDataset;
use crate::gradcore::{GradError, ParamSet, Tensor};
use crate::models::Classifier;

pub const REPORT_SCHEMA: &str = "metadr-report/1";
pub const AGGREGATE_SCHEMA: &str = "metadr-aggregate/1";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate on an empty test set")]
    EmptySet,
    #[error("reports disagree: {0}")]
    Mismatch(String),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

const EVAL_BATCH: usize = 256;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of test images whose argmax logit equals the label.
pub fn evaluate<M: Classifier>(model: &M, params: &ParamSet<f32>, test: &LabeledDataset) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let ps = params.constants();
    let classes = model.num_classes();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let logits = model.logits(&ps, &Tensor::constant(test.gather(chunk)))?;
        for (row, &i) in logits.value().data().chunks(classes).zip(chunk) {
            correct += usize::from(argmax(row) == test.labels()[i]);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// `values[i][j]`: accuracy on domain `j`'s test set after training stage `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub domains: Vec<String>,
    pub stages: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(domains: Vec<String>) -> Self {
        Self { domains, stages: Vec::new(), values: Vec::new() }
    }

    pub fn push_row(&mut self, stage: String, row: Vec<f64>) -> Result<(), EvalError> {
        if row.len() != self.domains.len() {
            return Err(EvalError::Malformed(format!("row of {} for {} domains", row.len(), self.domains.len())));
        }
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::Malformed("accuracy outside [0, 1]".into()));
        }
        self.stages.push(stage);
        self.values.push(row);
        Ok(())
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    /// Accuracy drop of every domain but the last between the stage that
    /// trained it and the final stage. Needs one stage per domain.
    pub fn forgetting(&self) -> Vec<f64> {
        let n = self.values.len();
        if n != self.domains.len() || n == 0 {
            return Vec::new();
        }
        (0..n - 1).map(|j| self.values[j][j] - self.values[n - 1][j]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for d in &self.domains {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for (s, row) in self.stages.iter().zip(&self.values) {
            out.push_str(s);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-domain training log of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub domain: String,
    pub steps: usize,
    /// Loss on the current-domain batch at the current parameters.
    pub task: Vec<f64>,
    /// Current-domain loss after the simulated adaptation step (Meta-DR only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recall: Vec<f64>,
    /// Transformed-batch loss after the simulated adaptation step (Meta-DR only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapt: Vec<f64>,
    /// Not serialized, so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl TrainLog {
    pub fn new(domain: &str) -> Self {
        Self { domain: domain.to_string(), steps: 0, task: Vec::new(), recall: Vec::new(), adapt: Vec::new(), wall_secs: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub software: String,
    pub method: String,
    pub seed: u64,
    /// Everything that defines the run except the seed.
    pub config: serde_json::Value,
    pub matrix: AccuracyMatrix,
    #[serde(rename = "final")]
    pub final_accuracy: Vec<f64>,
    pub forgetting: Vec<f64>,
    pub logs: Vec<TrainLog>,
    /// `"ok"` or a description of the abort.
    pub status: String,
}

impl RunReport {
    pub fn new(method: String, seed: u64, config: serde_json::Value, domains: Vec<String>) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            software: concat!("metadr ", env!("CARGO_PKG_VERSION")).to_string(),
            method,
            seed,
            config,
            matrix: AccuracyMatrix::new(domains),
            final_accuracy: Vec::new(),
            forgetting: Vec::new(),
            logs: Vec::new(),
            status: "ok".to_string(),
        }
    }

    /// Fills the summary fields from the matrix.
    pub fn finish(&mut self) {
        self.final_accuracy = self.matrix.final_row().map(<[f64]>::to_vec).unwrap_or_default();
        self.forgetting = self.matrix.forgetting();
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let r: Self = serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))?;
        if r.schema != REPORT_SCHEMA {
            return Err(EvalError::Malformed(format!("schema {:?}, expected {REPORT_SCHEMA:?}", r.schema)));
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema: String,
    pub method: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,
    pub stages: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub final_mean: Vec<f64>,
    pub final_std: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cell-wise mean and population std of reports that share a config.
pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Mismatch("no reports".into()))?;
    for r in &reports[1..] {
        if r.config != first.config || r.method != first.method {
            return Err(EvalError::Mismatch(format!("seed {} was run with a different config than seed {}", r.seed, first.seed)));
        }
        if r.matrix.domains != first.matrix.domains || r.matrix.stages != first.matrix.stages {
            return Err(EvalError::Mismatch("accuracy matrices have different layouts".into()));
        }
    }
    let rows = first.matrix.values.len();
    let cols = first.matrix.domains.len();
    let mut mean = vec![vec![0.0; cols]; rows];
    let mut std = vec![vec![0.0; cols]; rows];
    for i in 0..rows {
        for j in 0..cols {
            let xs: Vec<f64> = reports.iter().map(|r| r.matrix.values[i][j]).collect();
            (mean[i][j], std[i][j]) = mean_std(&xs);
        }
    }
    Ok(Aggregate {
        schema: AGGREGATE_SCHEMA.to_string(),
        method: first.method.clone(),
        config: first.config.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        domains: first.matrix.domains.clone(),
        stages: first.matrix.stages.clone(),
        final_mean: mean.last().cloned().unwrap_or_default(),
        final_std: std.last().cloned().unwrap_or_default(),
        mean,
        std,
    })
}

impl Aggregate {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("aggregate serializes");
        s.push('\n');
        s
    }

    /// Per-stage mean accuracies as CSV (one row per stage).
    pub fn curves_csv(&self) -> String {
        AccuracyMatrix { domains: self.domains.clone(), stages: self.stages.clone(), values: self.mean.clone() }.to_csv()
    }
}

/// Text table with one row per aggregate: final accuracy (percent) per
/// domain as `mean ± std`, plus the average over domains.
pub fn render_table(rows: &[Aggregate]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let cell = |m: f64, s: f64| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
    let mut header = vec!["method".to_string()];
    header.extend(first.domains.iter().cloned());
    header.push("avg".into());
    let mut body: Vec<Vec<String>> = Vec::new();
    for a in rows {
        let mut line = vec![a.method.clone()];
        line.extend(a.final_mean.iter().zip(&a.final_std).map(|(&m, &s)| cell(m, s)));
        let n = a.final_mean.len().max(1) as f64;
        line.push(format!("{:.1}", 100.0 * a.final_mean.iter().sum::<f64>() / n));
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|l| l[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let fmt_line = |l: &[String]| {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = fmt_line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for l in &body {
        out.push_str(&fmt_line(l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(seed: u64, rows: Vec<Vec<f64>>) -> RunReport {
        let mut r = RunReport::new("naive".into(), seed, serde_json::json!({"h": 1}), vec!["a".into(), "b".into()]);
        for (i, row) in rows.into_iter().enumerate() {
            r.matrix.push_row(format!("s{i}"), row).unwrap();
        }
        r.finish();
        r
    }

    #[test]
    fn forgetting_examples() {
        let r = report(0, vec![vec![0.9, 0.1], vec![0.7, 0.8]]);
        assert_eq!(r.forgetting.len(), 1);
        assert!((r.forgetting[0] - 0.2).abs() < 1e-12);
        let c = report(0, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(c.forgetting, vec![0.0]);
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[report(1, vec![vec![0.8, 0.5]]), report(2, vec![vec![0.9, 0.5]])]).unwrap();
        assert!((a.mean[0][0] - 0.85).abs() < 1e-12);
        assert!((a.std[0][0] - 0.05).abs() < 1e-12);
        assert_eq!(a.std[0][1], 0.0);
        let single = aggregate(&[report(1, vec![vec![0.3, 0.4]])]).unwrap();
        assert_eq!(single.std, vec![vec![0.0, 0.0]]);
        let mut other = report(2, vec![vec![0.9, 0.5]]);
        other.config = serde_json::json!({"h": 2});
        assert!(aggregate(&[report(1, vec![vec![0.8, 0.5]]), other]).is_err());
    }

    #[test]
    fn json_round_trip_and_csv_rows() {
        let r = report(3, vec![vec![0.25, 0.5], vec![0.125, 1.0]]);
        let text = r.to_json();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), text);
        assert_eq!(r.matrix.to_csv().lines().count(), 3);
        let mut m = r.matrix.clone();
        assert!(m.push_row("x".into(), vec![1.5, 0.0]).is_err());
        assert!(m.push_row("x".into(), vec![0.5]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn table_lists_final_rows() {
        let a = aggregate(&[report(1, vec![vec![0.2, 0.3], vec![0.8, 0.9]])]).unwrap();
        let t = render_table(&[a]);
        assert!(t.contains("80.0 ± 0.0"));
        assert!(t.contains("90.0 ± 0.0"));
        assert_eq!(t.lines().count(), 3);
    }
}
