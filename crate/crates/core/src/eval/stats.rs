//! AUROC, Wilson accuracy intervals and bootstrap AUROC intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

pub const DEFAULT_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn contains_point(&self) -> bool {
        self.lower <= self.point && self.point <= self.upper
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AurocUndefined(format!(
            "{pos} positive and {neg} negative items"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Higher score means more likely correct.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average 1-based ranks over tie groups, summed for positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += avg_rank * positives as f64;
        start = end;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Point estimate and Wilson score interval at 95%.
pub fn accuracy_ci(correct: &[bool]) -> Result<Estimate> {
    if correct.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let k = correct.iter().filter(|&&c| c).count();
    Ok(wilson(k, correct.len(), Z_95))
}

pub fn wilson(successes: usize, n: usize, z: f64) -> Estimate {
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Estimate {
        point: p,
        lower: (centre - half).max(0.0).min(p),
        upper: (centre + half).min(1.0).max(p),
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// AUROC with a stratified bootstrap interval: each resample draws
/// positives and negatives separately, with replacement.
pub fn auroc_ci(scores: &[f64], labels: &[bool], resamples: usize, seed: u64) -> Result<Estimate> {
    let (pos_n, neg_n) = check_inputs(scores, labels)?;
    if pos_n < 2 || neg_n < 2 {
        return Err(Error::AurocUndefined(format!(
            "bootstrap needs two items per class, got {pos_n} positive and {neg_n} negative"
        )));
    }
    if resamples == 0 {
        return Err(Error::Invalid("resamples must be positive".into()));
    }
    let point = auroc(scores, labels)?;
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| labels[i]).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| !labels[i]).map(|i| scores[i]).collect();
    let lbl: Vec<bool> = (0..pos.len() + neg.len()).map(|i| i < pos.len()).collect();

    let mut stats: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["auroc-bootstrap", &b.to_string()]));
            let mut sample = Vec::with_capacity(lbl.len());
            sample.extend((0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]));
            sample.extend((0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]));
            auroc(&sample, &lbl).expect("both classes present")
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(Estimate {
        point,
        lower: percentile(&stats, 0.025).min(point),
        upper: percentile(&stats, 0.975).max(point),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from the strictest threshold down, starting at (0, 0).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}
