//! Agreement metrics between predicted and ground-truth MOS.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions vs {gt} ground-truth values")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least {min} values, got {len}")]
    TooShort { len: usize, min: usize },
    #[error("{0} vector is constant; correlation is undefined")]
    Constant(&'static str),
    #[error("non-finite value in {0} vector")]
    NonFinite(&'static str),
}

fn check(pred: &[f64], gt: &[f64], min: usize) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.len() < min {
        return Err(MetricError::TooShort {
            len: pred.len(),
            min,
        });
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("prediction"));
    }
    if gt.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("ground-truth"));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt, 2)?;
    if is_constant(pred) {
        return Err(MetricError::Constant("prediction"));
    }
    if is_constant(gt) {
        return Err(MetricError::Constant("ground-truth"));
    }
    Ok(pearson(pred, gt))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank-order correlation with average ranks for ties.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt, 2)?;
    if is_constant(pred) {
        return Err(MetricError::Constant("prediction"));
    }
    if is_constant(gt) {
        return Err(MetricError::Constant("ground-truth"));
    }
    Ok(pearson(&average_ranks(pred), &average_ranks(gt)))
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt, 1)?;
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// PLCC/SRCC/RMSE over one prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub n: usize,
    /// Range of the ground truth, so RMSE can be read against the MOS scale it was computed on.
    pub mos_min: f64,
    pub mos_max: f64,
}

impl EvalReport {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            plcc: plcc(pred, gt)?,
            srcc: srcc(pred, gt)?,
            rmse: rmse(pred, gt)?,
            n: pred.len(),
            mos_min: gt.iter().copied().fold(f64::INFINITY, f64::min),
            mos_max: gt.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>12}", "metric", "value")?;
        writeln!(f, "{:<8}{:>12.6}", "PLCC", self.plcc)?;
        writeln!(f, "{:<8}{:>12.6}", "SRCC", self.srcc)?;
        writeln!(f, "{:<8}{:>12.6}", "RMSE", self.rmse)?;
        writeln!(f, "{:<8}{:>12}", "n", self.n)?;
        write!(f, "{:<8}{:>12}", "scale", format!("[{:.3}, {:.3}]", self.mos_min, self.mos_max))
    }
}
