//! Perplexity, semantic entropy and discrete semantic entropy (nats).

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_sizes, Clustering};
use crate::error::{Error, Result};
use crate::genclient::{mean_logprob, sequence_loglik, Generation, LogprobMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub question_id: String,
    /// Perplexity of the lowest-perplexity sample.
    pub perplexity: Option<f64>,
    pub semantic_entropy: Option<f64>,
    pub discrete_semantic_entropy: f64,
    pub cluster_count: usize,
    /// One entry per sample, by sample index; `None` for samples without
    /// token log-probabilities.
    pub per_sample_perplexity: Vec<Option<f64>>,
    /// Set when the run was made without token log-probabilities.
    pub logprob_free: bool,
}

/// `exp` of the mean negative token log-likelihood.
pub fn perplexity(gen: &Generation) -> Result<f64> {
    Ok((-sequence_loglik(gen)?).exp())
}

/// Plug-in entropy of the cluster-size distribution.
pub fn discrete_semantic_entropy(sizes: &[usize]) -> Result<f64> {
    if sizes.is_empty() {
        return Err(Error::Invalid("discrete SE needs at least one cluster".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Invalid("cluster sizes must be positive".into()));
    }
    let total = sizes.iter().sum::<usize>() as f64;
    let h: f64 = sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn by_sample_index<'a>(gens: &'a [Generation], clustering: &Clustering) -> Result<Vec<&'a Generation>> {
    clustering.validate(gens.len())?;
    let mut ordered: Vec<Option<&Generation>> = vec![None; gens.len()];
    for g in gens {
        if g.question_id != clustering.question_id {
            return Err(Error::Invalid(format!(
                "generation for `{}` scored against clustering of `{}`",
                g.question_id, clustering.question_id
            )));
        }
        match ordered.get_mut(g.sample_index) {
            Some(slot @ None) => *slot = Some(g),
            _ => {
                return Err(Error::Invalid(format!(
                    "`{}`: bad or duplicate sample index {}",
                    g.question_id, g.sample_index
                )))
            }
        }
    }
    Ok(ordered.into_iter().map(|g| g.expect("validated partition")).collect())
}

/// Entropy over clusters weighted by length-normalized sequence likelihood.
///
/// Cluster weight is the sum of `exp(mean token log-prob)` over members,
/// normalized across clusters; everything is computed in log space. Blank
/// samples without log-probabilities carry zero weight.
pub fn semantic_entropy(gens: &[Generation], clustering: &Clustering) -> Result<f64> {
    let ordered = by_sample_index(gens, clustering)?;
    let mut logliks = Vec::with_capacity(ordered.len());
    for g in &ordered {
        match mean_logprob(&g.token_logprobs) {
            Some(ll) => logliks.push(ll),
            None if g.text.trim().is_empty() => logliks.push(f64::NEG_INFINITY),
            None => {
                return Err(Error::Invalid(format!(
                    "`{}` sample {} has no token log-probabilities; use discrete SE",
                    g.question_id, g.sample_index
                )))
            }
        }
    }
    let log_weights: Vec<f64> = clustering
        .clusters
        .iter()
        .map(|members| log_sum_exp(members.iter().map(|&i| logliks[i])))
        .collect();
    let log_total = log_sum_exp(log_weights.iter().copied());
    if log_total == f64::NEG_INFINITY {
        return Err(Error::Invalid(format!(
            "`{}`: no sample carries token log-probabilities",
            clustering.question_id
        )));
    }
    let h: f64 = log_weights
        .iter()
        .filter(|lw| lw.is_finite())
        .map(|lw| {
            let log_p = lw - log_total;
            -log_p.exp() * log_p
        })
        .sum();
    Ok(h.max(0.0))
}

pub fn score_question(gens: &[Generation], clustering: &Clustering, mode: LogprobMode) -> Result<UncertaintyScore> {
    let ordered = by_sample_index(gens, clustering)?;
    let discrete = discrete_semantic_entropy(&cluster_sizes(clustering))?;
    let (per_sample, perplexity, se) = match mode {
        LogprobMode::DiscreteOnly => (vec![None; ordered.len()], None, None),
        LogprobMode::Required => {
            let per_sample: Vec<Option<f64>> = ordered
                .iter()
                .map(|g| g.has_logprobs().then(|| perplexity(g)).transpose())
                .collect::<Result<_>>()?;
            let best = per_sample
                .iter()
                .flatten()
                .copied()
                .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.min(p))));
            (per_sample, best, Some(semantic_entropy(gens, clustering)?))
        }
    };
    Ok(UncertaintyScore {
        question_id: clustering.question_id.clone(),
        perplexity,
        semantic_entropy: se,
        discrete_semantic_entropy: discrete,
        cluster_count: clustering.cluster_count(),
        per_sample_perplexity: per_sample,
        logprob_free: mode == LogprobMode::DiscreteOnly,
    })
}
