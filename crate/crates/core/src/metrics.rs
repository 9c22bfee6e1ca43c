//! Label-based and instance-based multi-label attribute metrics.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AttributeCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mA")]
    pub ma: f64,
    pub instance_accuracy: f64,
    pub instance_precision: f64,
    pub instance_recall: f64,
    pub instance_f1: f64,
    pub per_attribute: Vec<AttributeCounts>,
    /// Attributes left out of mA because they have no positive or no
    /// negative ground truth.
    #[serde(default)]
    pub excluded: Vec<usize>,
}

pub const REPORT_HEADER: &str = "run_id,mA,accuracy,precision,recall,f1";

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [
            self.ma,
            self.instance_accuracy,
            self.instance_precision,
            self.instance_recall,
            self.instance_f1,
        ]
    }

    /// One results-table row: run id followed by the five metrics.
    pub fn to_row(&self, run_id: &str) -> String {
        let mut s = run_id.to_string();
        for v in self.values() {
            write!(s, ",{v}").unwrap();
        }
        s
    }
}

/// A parsed results-table row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub values: [f64; 5],
}

impl ReportRow {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Config(format!(
                "report row needs 6 fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let mut values = [0.0; 5];
        for (v, f) in values.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .map_err(|_| Error::Config(format!("bad metric value {f:?} in {line:?}")))?;
        }
        Ok(ReportRow {
            run_id: fields[0].to_string(),
            values,
        })
    }
}

/// Harmonic mean, or 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn evaluate(scores: &Tensor, targets: &Tensor, threshold: f64) -> Result<MetricReport> {
    evaluate_with(Execution::Sequential, scores, targets, threshold)
}

/// Thresholds `scores` (`[N, 1, 1, L]` probabilities) at `threshold` and
/// scores them against binary `targets` of the same shape.
///
/// mA averages `(TP/P + TN/N) / 2` over attributes that have both positive
/// and negative ground truth. Instance accuracy, precision and recall are
/// per-sample set overlaps averaged over samples, with these conventions
/// for empty sets: empty union scores accuracy 1; no predicted positives
/// scores precision 1 if there are no true positives either, else 0; no
/// true positives scores recall 1. F1 is taken from the averaged precision
/// and recall.
pub fn evaluate_with(exec: Execution, scores: &Tensor, targets: &Tensor, threshold: f64) -> Result<MetricReport> {
    let s = scores.shape();
    if s != targets.shape() || s.h() != 1 || s.w() != 1 {
        return Err(Error::InvalidShape(format!(
            "scores {s:?} and targets {:?} must both be [N,1,1,L]",
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidShape("targets must be binary".into()));
    }
    let (n, l) = (s.n(), s.c());
    if n == 0 || l == 0 {
        return Err(Error::InvalidShape(format!("nothing to evaluate in {s:?}")));
    }
    let pred = |i: usize, j: usize| scores.data()[i * l + j] >= threshold;
    let truth = |i: usize, j: usize| targets.data()[i * l + j] == 1.0;

    let per_attribute = par::map_range(exec, l, |j| {
        let mut c = AttributeCounts::default();
        for i in 0..n {
            match (truth(i, j), pred(i, j)) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    });

    let mut excluded = Vec::new();
    let mut ma_sum = 0.0;
    for (j, c) in per_attribute.iter().enumerate() {
        if c.positives() == 0 || c.negatives() == 0 {
            warn!("attribute {j} has a degenerate label distribution; excluded from mA");
            excluded.push(j);
            continue;
        }
        ma_sum += 0.5 * (c.tp as f64 / c.positives() as f64 + c.tn as f64 / c.negatives() as f64);
    }
    let valid = l - excluded.len();
    let ma = if valid > 0 {
        ma_sum / valid as f64
    } else {
        warn!("every attribute is degenerate; mA reported as 0");
        0.0
    };

    let terms = par::map_range(exec, n, |i| {
        let (mut inter, mut union, mut npred, mut ntrue) = (0usize, 0usize, 0usize, 0usize);
        for j in 0..l {
            let (t, p) = (truth(i, j), pred(i, j));
            inter += (t && p) as usize;
            union += (t || p) as usize;
            npred += p as usize;
            ntrue += t as usize;
        }
        let acc = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let prec = match (npred, ntrue) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => inter as f64 / npred as f64,
        };
        let rec = if ntrue == 0 { 1.0 } else { inter as f64 / ntrue as f64 };
        [acc, prec, rec]
    });
    let mut sums = [0.0; 3];
    for t in &terms {
        for k in 0..3 {
            sums[k] += t[k];
        }
    }
    let [acc, prec, rec] = sums.map(|v| v / n as f64);

    Ok(MetricReport {
        ma,
        instance_accuracy: acc,
        instance_precision: prec,
        instance_recall: rec,
        instance_f1: f1_score(prec, rec),
        per_attribute,
        excluded,
    })
}
