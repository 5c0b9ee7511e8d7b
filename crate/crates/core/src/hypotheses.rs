//! Focal length candidate schedule and candidate selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax temperature applied to the negated flow losses.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// `m` focal candidates from `f_max` down to `f_min`, mixing exponential
/// (weight 0.75) and linear (weight 0.25) spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalSchedule {
    pub f_min: f64,
    pub f_max: f64,
    pub candidates: Vec<f64>,
}

impl FocalSchedule {
    pub fn new(m: usize, f_min: f64, f_max: f64) -> Result<Self> {
        build_focal_schedule(m, f_min, f_max)
    }

    /// Schedule relative to the image height: `[0.1·H, 3.5·H]`.
    pub fn for_height(m: usize, height: usize) -> Result<Self> {
        let h = height as f64;
        Self::new(m, 0.1 * h, 3.5 * h)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Index of the candidate closest to `focal` in log space.
    pub fn nearest_index(&self, focal: f64) -> usize {
        let lf = focal.ln();
        self.candidates
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1.ln() - lf)
                    .abs()
                    .total_cmp(&(b.1.ln() - lf).abs())
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

pub fn build_focal_schedule(m: usize, f_min: f64, f_max: f64) -> Result<FocalSchedule> {
    if m < 2 {
        return Err(Error::InvalidRange(format!("need at least 2 candidates, got {m}")));
    }
    if !(f_min > 0.0 && f_min < f_max && f_max.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "need 0 < f_min < f_max, got f_min={f_min} f_max={f_max}"
        )));
    }
    let (ln_min, ln_max) = (f_min.ln(), f_max.ln());
    let candidates = (0..m)
        .map(|i| {
            let delta = i as f64 / (m - 1) as f64;
            if i == 0 {
                return f_max;
            }
            if i == m - 1 {
                return f_min;
            }
            let f_exp = (delta * ln_min + (1.0 - delta) * ln_max).exp();
            let f_lin = delta * f_min + (1.0 - delta) * f_max;
            0.75 * f_exp + 0.25 * f_lin
        })
        .collect();
    Ok(FocalSchedule {
        f_min,
        f_max,
        candidates,
    })
}

/// Probability vector over the focal candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodVector(Vec<f64>);

impl LikelihoodVector {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidDistribution("negative or non-finite entry".into()));
        }
        let s: f64 = probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(Self(probabilities))
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    /// Softmax of arbitrary finite scores.
    pub fn softmax(scores: &[f64]) -> Self {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        Self(e.into_iter().map(|v| v / z).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index of the most likely candidate; ties go to the lower index, i.e. the
/// larger focal length.
pub fn select_best_candidate(p: &LikelihoodVector) -> usize {
    let mut best = 0;
    for (i, &v) in p.0.iter().enumerate() {
        if v > p.0[best] {
            best = i;
        }
    }
    best
}

/// `softmax(-temperature · losses)`.
pub fn losses_to_target_distribution(losses: &[f64], temperature: f64) -> Result<LikelihoodVector> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("candidate losses"));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("candidate loss {l}")));
    }
    let scores: Vec<f64> = losses.iter().map(|l| -temperature * l).collect();
    Ok(LikelihoodVector::softmax(&scores))
}

/// Index of the smallest loss, ties to the lower index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}
