//! Read-only projections of a run for reviewers, and the persisted review set.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sentropy_core::metrics::UncertaintyScore;
use sentropy_core::run::{RunDir, Stage};
use sentropy_core::scoring::lowest_perplexity_index;
use sentropy_core::{Clustering, Generation};

use crate::error::{Result, ReviewError};

pub const REVIEW_SET_FILE: &str = "review/review_set.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberView {
    pub sample_index: usize,
    pub text: String,
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub members: Vec<MemberView>,
}

/// What a reviewer sees for one question. Carries no correctness labels or
/// entropy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewBundle {
    pub question_id: String,
    pub question: String,
    pub reference_answer: String,
    pub lowest_perplexity_answer: Option<String>,
    /// In cluster-creation order.
    pub clusters: Vec<ClusterView>,
    pub cluster_count: usize,
}

/// Bundles for every eligible question. Needs generate, cluster and metrics.
pub fn build_bundles(run: &RunDir) -> Result<BTreeMap<String, ReviewBundle>> {
    let mut gens: HashMap<String, Vec<Generation>> = HashMap::new();
    for g in run.read_stage::<Generation>(Stage::Generate)? {
        gens.entry(g.question_id.clone()).or_default().push(g);
    }
    let clusterings: HashMap<String, Clustering> = run
        .read_stage::<Clustering>(Stage::Cluster)?
        .into_iter()
        .map(|c| (c.question_id.clone(), c))
        .collect();
    let scores: HashMap<String, UncertaintyScore> = run
        .read_stage::<UncertaintyScore>(Stage::Metrics)?
        .into_iter()
        .map(|s| (s.question_id.clone(), s))
        .collect();

    let mut out = BTreeMap::new();
    for q in run.eligible() {
        let missing = |what: &str| {
            ReviewError::Core(sentropy_core::Error::Invalid(format!(
                "no {what} for question `{}`",
                q.id
            )))
        };
        let g = gens.get(&q.id).ok_or_else(|| missing("generations"))?;
        let c = clusterings.get(&q.id).ok_or_else(|| missing("clustering"))?;
        let s = scores.get(&q.id).ok_or_else(|| missing("metrics"))?;
        let text_of = |i: usize| {
            g.iter()
                .find(|x| x.sample_index == i)
                .map(|x| x.text.clone())
                .unwrap_or_default()
        };
        let perplexity_of = |i: usize| s.per_sample_perplexity.get(i).copied().flatten();
        let clusters = c
            .clusters
            .iter()
            .map(|members| ClusterView {
                members: members
                    .iter()
                    .map(|&i| MemberView {
                        sample_index: i,
                        text: text_of(i),
                        perplexity: perplexity_of(i),
                    })
                    .collect(),
            })
            .collect();
        let lowest = lowest_perplexity_index(&s.per_sample_perplexity, 0..s.per_sample_perplexity.len());
        out.insert(
            q.id.clone(),
            ReviewBundle {
                question_id: q.id.clone(),
                question: q.text.clone(),
                reference_answer: q.reference_answer.clone(),
                lowest_perplexity_answer: lowest.map(text_of),
                clusters,
                cluster_count: c.cluster_count(),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSet {
    pub seed: u64,
    pub size: usize,
    /// In corpus order.
    pub question_ids: Vec<String>,
}

/// Uniform sample of `n` ids without replacement, returned in input order.
pub fn sample_review_set(eligible: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 || n > eligible.len() {
        return Err(ReviewError::TooLarge {
            requested: n,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, eligible.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| eligible[i].clone()).collect())
}

/// The run's persisted review set, created on first use so that every
/// reviewer sees the same questions. A stored set wins over `n` and `seed`.
pub fn load_or_create_review_set(run: &RunDir, n: usize, seed: u64) -> Result<ReviewSet> {
    if let Some(text) = run.read_aux(REVIEW_SET_FILE)? {
        return serde_json::from_str(&text).map_err(|e| {
            ReviewError::Core(sentropy_core::Error::StageFile {
                path: run.path().join(REVIEW_SET_FILE),
                message: e.to_string(),
            })
        });
    }
    let eligible: Vec<String> = run.eligible().map(|q| q.id.clone()).collect();
    let set = ReviewSet {
        seed,
        size: n,
        question_ids: sample_review_set(&eligible, n, seed)?,
    };
    let mut text = serde_json::to_string_pretty(&set).expect("review set serializes");
    text.push('\n');
    run.write_aux(REVIEW_SET_FILE, text.as_bytes())?;
    Ok(set)
}
