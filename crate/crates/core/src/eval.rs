//! Confusion counts, the four imbalance-aware metrics, and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, PredictionRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (predicted, truth) in pairs {
            cm.add(predicted, truth);
        }
        cm
    }

    pub fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with the positive and negative classes exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Metrics with `None` standing for an undefined (zero-denominator) value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub n: u64,
    pub prevalence: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Counts predictions against truth by example id.
pub fn confusion(predictions: &[PredictionRecord], truth: &BTreeMap<String, Label>) -> Result<ConfusionMatrix> {
    confusion_from(predictions.iter().map(|p| (p.example_id.as_str(), p.predicted_label)), truth)
}

/// [`confusion`] over bare `(example_id, predicted)` pairs.
pub fn confusion_from<'a>(
    predictions: impl IntoIterator<Item = (&'a str, Label)>,
    truth: &BTreeMap<String, Label>,
) -> Result<ConfusionMatrix> {
    let mut seen = BTreeSet::new();
    let mut cm = ConfusionMatrix::default();
    for (id, predicted) in predictions {
        let t = truth.get(id).ok_or_else(|| Error::UnknownExample(id.to_string()))?;
        if !seen.insert(id) {
            return Err(Error::Invalid(format!("duplicate prediction for {id}")));
        }
        cm.add(predicted, *t);
    }
    Ok(cm)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricSet> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Invalid("metrics need at least one example".into()));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricSet {
        accuracy: ratio(cm.tp + cm.tn, n),
        sensitivity: recall,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        f1,
        n,
        prevalence: (cm.tp + cm.fn_) as f64 / n as f64,
    })
}

pub const UNDEFINED_CELL: &str = "n/a";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED_CELL.to_string(), |x| format!("{:.2}", x * 100.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

/// Builds the comparison table: one row per run, sorted by label, metrics
/// as percentages with two decimals.
pub fn report(runs: &[(String, MetricSet)]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Invalid("report needs at least one run".into()));
    }
    let mut rows: Vec<&(String, MetricSet)> = runs.iter().collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let header = ["Run", "n", "Prevalence", "ACC", "Sensitivity", "Specificity", "F1"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|(label, m)| {
            [
                label.clone(),
                m.n.to_string(),
                format!("{:.2}", m.prevalence * 100.0),
                pct(m.accuracy),
                pct(m.sensitivity),
                pct(m.specificity),
                pct(m.f1),
            ]
        })
        .collect();

    let mut csv = String::from("run,n,prevalence,accuracy,sensitivity,specificity,f1\n");
    for c in &cells {
        let label = if c[0].contains(',') || c[0].contains('"') {
            format!("\"{}\"", c[0].replace('"', "\"\""))
        } else {
            c[0].clone()
        };
        writeln!(csv, "{label},{}", c[1..].join(",")).unwrap();
    }

    let mut widths = header.map(|h| h.chars().count());
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let render = |vals: &[&str]| -> String {
        vals.iter()
            .enumerate()
            .map(|(i, v)| {
                let pad = " ".repeat(widths[i] - v.chars().count());
                if i == 0 {
                    format!("{v}{pad}")
                } else {
                    format!("{pad}{v}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let mut text = String::new();
    for row in std::iter::once(header.map(String::from).to_vec())
        .chain(std::iter::once(rule))
        .chain(cells.iter().map(|c| c.to_vec()))
    {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        text.push_str(&render(&refs));
        text.push('\n');
    }
    Ok(Report { text, csv })
}

/// The four metric cells of a run, rendered as in the report.
pub fn metric_row(m: &MetricSet) -> String {
    [m.accuracy, m.sensitivity, m.specificity, m.f1]
        .into_iter()
        .map(pct)
        .collect::<Vec<_>>()
        .join(", ")
}
