use crate::detect::Orientation;
use crate::error::{input, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Raw score threshold; samples at or beyond it (in the malicious
    /// direction) are flagged. Infinite for the `(0, 0)` endpoint.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub orientation: Orientation,
}

fn check(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return input(format!("{name} population is empty"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return input(format!("{name} population has non-finite scores"));
    }
    Ok(())
}

/// Threshold sweep over distinct scores; tied scores move FPR and TPR in a
/// single step.
pub fn roc(malicious: &[f64], benign: &[f64], orientation: Orientation) -> Result<RocCurve> {
    check("malicious", malicious)?;
    check("benign", benign)?;
    let mut all: Vec<(f64, bool)> = malicious
        .iter()
        .map(|&s| (orientation.normalise(s), true))
        .chain(benign.iter().map(|&s| (orientation.normalise(s), false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (malicious.len() as f64, benign.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: orientation.normalise(f64::INFINITY) }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / nn, tpr: tp as f64 / np, threshold: orientation.normalise(t) });
    }
    Ok(RocCurve { points, orientation })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve.points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5).sum()
}

/// Mann-Whitney statistic `P(m > b) + P(m = b) / 2` via ranks.
pub fn auc_mann_whitney(malicious: &[f64], benign: &[f64], orientation: Orientation) -> Result<f64> {
    check("malicious", malicious)?;
    check("benign", benign)?;
    let mut all: Vec<(f64, bool)> = malicious
        .iter()
        .map(|&s| (orientation.normalise(s), true))
        .chain(benign.iter().map(|&s| (orientation.normalise(s), false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 * 0.5;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (malicious.len() as f64, benign.len() as f64);
    Ok((rank_sum - np * (np + 1.0) * 0.5) / (np * nn))
}

/// Largest TPR among curve points with `fpr <= max_fpr`.
pub fn tpr_at_fpr(curve: &RocCurve, max_fpr: f64) -> f64 {
    curve.points.iter().filter(|p| p.fpr <= max_fpr).map(|p| p.tpr).fold(0.0, f64::max)
}
