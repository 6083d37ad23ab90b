//! Confusion-matrix metrics for binary masks and their aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn is_binary<T: Scalar>(t: &Tensor<T>) -> bool {
    t.data().iter().all(|&v| v == T::zero() || v == T::one())
}

/// Pixel counts of two binary masks of equal shape.
pub fn confusion<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Confusion> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "confusion",
            format!("prediction {} vs truth {}", pred.shape(), truth.shape()),
        ));
    }
    if !is_binary(pred) || !is_binary(truth) {
        return Err(Error::Data("confusion needs binary masks".into()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Thresholds probabilities at `p >= 0.5`.
pub fn binarize<T: Scalar>(prob: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    prob.map(|p| if p >= half { T::one() } else { T::zero() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub iou: f64,
    pub dice: f64,
    pub sens: f64,
    pub spec: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["Acc", "IoU", "Dice", "Sens", "Spec"];

    pub fn values(&self) -> [f64; 5] {
        [self.acc, self.iou, self.dice, self.sens, self.spec]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            acc: v[0],
            iou: v[1],
            dice: v[2],
            sens: v[3],
            spec: v[4],
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, IoU, Dice, sensitivity and specificity. A zero denominator
/// means the quantity has nothing to get wrong and scores 1.
pub fn evaluate(c: &Confusion) -> Metrics {
    Metrics {
        acc: ratio(c.tp + c.tn, c.total()),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sens: ratio(c.tp, c.tp + c.fn_),
        spec: ratio(c.tn, c.tn + c.fp),
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn aggregate(items: &[Metrics]) -> Result<Summary> {
    if items.is_empty() {
        return Err(Error::Data("nothing to aggregate".into()));
    }
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        let col: Vec<f64> = items.iter().map(|m| m.values()[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    Ok(Summary {
        n: items.len(),
        mean: Metrics::from_values(mean),
        std: Metrics::from_values(std),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

/// Metrics of one fold: the mean over its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub samples: Vec<SampleRecord>,
    pub metrics: Metrics,
}

impl FoldRecord {
    pub fn new(fold: usize, samples: Vec<SampleRecord>) -> Result<Self> {
        let per: Vec<Metrics> = samples.iter().map(|s| s.metrics).collect();
        let metrics = aggregate(&per)?.mean;
        Ok(Self { fold, samples, metrics })
    }
}

/// Per-fold results plus the mean ± std across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldRecord>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn new(folds: Vec<FoldRecord>) -> Result<Self> {
        let per: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
        let summary = aggregate(&per)?;
        Ok(Self { folds, summary })
    }

    /// One JSON object per fold, then one for the summary.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for f in &self.folds {
            let line = serde_json::json!({
                "record": "fold",
                "fold": f.fold,
                "samples": f.samples.len(),
                "metrics": f.metrics,
            });
            let _ = writeln!(s, "{line}");
        }
        let line = serde_json::json!({
            "record": "summary",
            "folds": self.summary.n,
            "mean": self.summary.mean,
            "std": self.summary.std,
        });
        let _ = writeln!(s, "{line}");
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "fold");
        for name in Metrics::NAMES {
            let _ = write!(s, " {name:>17}");
        }
        s.push('\n');
        for f in &self.folds {
            let _ = write!(s, "{:<8}", f.fold);
            for v in f.metrics.values() {
                let _ = write!(s, " {v:>17.4}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<8}", "mean±std");
        for (m, d) in self.summary.mean.values().iter().zip(self.summary.std.values()) {
            let _ = write!(s, " {:>17}", format!("{m:.4} ± {d:.4}"));
        }
        s.push('\n');
        s
    }
}
