//! IoU-based evaluation over a dataset.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::postprocess::Box3;

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "prediction of length {} against ground truth of length {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Debug-only overlap of two axis-aligned boxes.
pub fn box_iou(a: &Box3, b: &Box3) -> f64 {
    let inter: f64 = (0..3)
        .map(|k| (a.max[k].min(b.max[k]) - a.min[k].max(b.min[k])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

/// Per-sample result handed to [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Mask(Vec<bool>),
    /// Generation produced no usable mask; scored as IoU 0.
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    /// Threshold and the fraction of samples whose IoU strictly exceeds it.
    pub acc_at: Vec<(f64, f64)>,
    pub n_samples: usize,
    pub n_errors: usize,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn acc(&self, k: f64) -> Option<f64> {
        self.acc_at.iter().find(|(t, _)| *t == k).map(|&(_, a)| a)
    }

    /// JSON with keys `miou`, `acc_at_<k>`, `n_samples`, `n_errors`, `config_digest`.
    pub fn to_json(&self) -> Value {
        let mut map = BTreeMap::new();
        map.insert("miou".to_string(), json!(self.miou));
        for (k, a) in &self.acc_at {
            map.insert(format!("acc_at_{k}"), json!(a));
        }
        map.insert("n_samples".to_string(), json!(self.n_samples));
        map.insert("n_errors".to_string(), json!(self.n_errors));
        map.insert("config_digest".to_string(), json!(self.config_digest));
        json!(map)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report is plain JSON");
        s.push('\n');
        s
    }
}

/// Scores predictions against aligned ground truths.
pub fn evaluate(
    predictions: &[Prediction],
    ground_truth: &[Vec<bool>],
    thresholds: &[f64],
    config_digest: &str,
) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut ious = Vec::with_capacity(predictions.len());
    let mut n_errors = 0;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        ious.push(match pred {
            Prediction::Mask(m) => iou(m, gt)?,
            Prediction::Failed => {
                n_errors += 1;
                0.0
            }
        });
    }
    Ok(summarize(&ious, n_errors, thresholds, config_digest))
}

/// Aggregates per-sample IoUs; an empty set reports zeros.
pub fn summarize(ious: &[f64], n_errors: usize, thresholds: &[f64], config_digest: &str) -> MetricsReport {
    let n = ious.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    MetricsReport {
        miou: if n == 0 { 0.0 } else { ious.iter().sum::<f64>() / n as f64 },
        acc_at: thresholds
            .iter()
            .map(|&k| (k, frac(ious.iter().filter(|&&v| v > k).count())))
            .collect(),
        n_samples: n,
        n_errors,
        config_digest: config_digest.to_string(),
    }
}
