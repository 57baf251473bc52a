//! Expert-scored accuracy and AUROC, compared with the automatic scorer.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use sentropy_core::eval::{auroc_ci, format_estimate, Estimate, EvalConfig, Table};
use sentropy_core::metrics::UncertaintyScore;
use sentropy_core::run::{RunDir, Stage};
use sentropy_core::scoring::{CorrectnessRecord, Definition, Method};
use sentropy_core::util::derive_seed;
use sentropy_core::Clustering;

use crate::annotation::{Annotation, QuestionQuality};
use crate::bundle::ReviewSet;
use crate::error::Result;

/// What the run knows about one question, for comparison with experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertInput {
    pub question_id: String,
    pub cluster_sizes: Vec<usize>,
    pub llm_lp_correct: Option<bool>,
    pub llm_lc_correct: bool,
    pub semantic_entropy: Option<f64>,
    pub perplexity: Option<f64>,
}

impl ExpertInput {
    /// Unique largest cluster, if there is one.
    pub fn largest(&self) -> Option<usize> {
        let max = *self.cluster_sizes.iter().max()?;
        let mut it = self.cluster_sizes.iter().enumerate().filter(|(_, &s)| s == max);
        let first = it.next().map(|(i, _)| i);
        if it.next().is_some() {
            None
        } else {
            first
        }
    }
}

/// Inputs for every eligible question. Needs cluster, metrics and score.
pub fn inputs_from_run(run: &RunDir) -> Result<Vec<ExpertInput>> {
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
    let records: Vec<CorrectnessRecord> = run.read_stage(Stage::Score)?;
    let outcome = |id: &str, method: Method| {
        records
            .iter()
            .find(|r| r.question_id == id && r.method == method && r.definition == Definition::Primary)
            .map(|r| r.correct)
    };
    let mut out = Vec::new();
    for q in run.eligible() {
        let (Some(c), Some(s)) = (clusterings.get(&q.id), scores.get(&q.id)) else {
            return Err(sentropy_core::Error::Invalid(format!("incomplete stages for `{}`", q.id)).into());
        };
        out.push(ExpertInput {
            question_id: q.id.clone(),
            cluster_sizes: c.clusters.iter().map(Vec::len).collect(),
            llm_lp_correct: outcome(&q.id, Method::LowestPerplexity),
            llm_lc_correct: outcome(&q.id, Method::LargestCluster).unwrap_or(false),
            semantic_entropy: s.semantic_entropy,
            perplexity: s.perplexity,
        });
    }
    Ok(out)
}

/// One row of the accuracy grid; `cluster_count` is `None` for the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCell {
    pub cluster_count: Option<usize>,
    pub n: usize,
    pub lp_expert: Option<f64>,
    pub lp_llm: Option<f64>,
    pub lc_expert: Option<f64>,
    pub lc_llm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub review_set_size: usize,
    pub annotated: usize,
    /// Review-set questions without any annotation; left out of every figure.
    pub unannotated: usize,
    pub reviewers: usize,
    pub by_cluster_count: Vec<ExpertCell>,
    pub overall: ExpertCell,
    /// SE against expert largest-cluster correctness.
    pub se_auroc: Option<Estimate>,
    /// Perplexity against expert lowest-perplexity correctness.
    pub perplexity_auroc: Option<Estimate>,
    pub clustering_successes: usize,
    pub clustering_success_rate: Option<f64>,
    pub flawed_questions: usize,
}

/// Strict majority; an even split counts as false.
pub fn majority(votes: impl IntoIterator<Item = bool>) -> bool {
    let (mut yes, mut n) = (0usize, 0usize);
    for v in votes {
        yes += usize::from(v);
        n += 1;
    }
    2 * yes > n
}

#[derive(Debug, Clone)]
struct Resolved<'a> {
    input: &'a ExpertInput,
    lp_expert: bool,
    lc_expert: bool,
    success: bool,
    flawed: bool,
}

fn fraction(items: &[&Resolved<'_>], f: impl Fn(&Resolved<'_>) -> Option<bool>) -> Option<f64> {
    let vals: Vec<bool> = items.iter().map(|r| f(r)).collect::<Option<_>>()?;
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().filter(|&&v| v).count() as f64 / vals.len() as f64)
}

fn cell(cluster_count: Option<usize>, items: &[&Resolved<'_>]) -> ExpertCell {
    ExpertCell {
        cluster_count,
        n: items.len(),
        lp_expert: fraction(items, |r| Some(r.lp_expert)),
        lp_llm: fraction(items, |r| r.input.llm_lp_correct),
        lc_expert: fraction(items, |r| Some(r.lc_expert)),
        lc_llm: fraction(items, |r| Some(r.input.llm_lc_correct)),
    }
}

fn expert_auroc(
    items: &[Resolved<'_>],
    score: impl Fn(&ExpertInput) -> Option<f64>,
    label: impl Fn(&Resolved<'_>) -> bool,
    config: &EvalConfig,
    tag: &str,
) -> Result<Option<Estimate>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in items {
        let Some(u) = score(r.input) else {
            return Ok(None);
        };
        scores.push(-u);
        labels.push(label(r));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Ok(None);
    }
    let seed = derive_seed(config.seed, &["expert", tag]);
    Ok(Some(auroc_ci(&scores, &labels, config.resamples, seed)?))
}

/// Resolves reviewer disagreement by majority and summarizes expert
/// correctness against the automatic labels. `annotations` is the current
/// view (latest per reviewer).
pub fn expert_metrics(
    inputs: &[ExpertInput],
    review_set: &ReviewSet,
    annotations: &[Annotation],
    config: &EvalConfig,
) -> Result<ExpertReport> {
    let by_id: HashMap<&str, &ExpertInput> = inputs.iter().map(|i| (i.question_id.as_str(), i)).collect();
    let mut per_question: HashMap<&str, Vec<&Annotation>> = HashMap::new();
    for a in annotations {
        per_question.entry(a.question_id.as_str()).or_default().push(a);
    }
    let reviewers: HashSet<&str> = annotations
        .iter()
        .filter(|a| review_set.question_ids.contains(&a.question_id))
        .map(|a| a.reviewer_id.as_str())
        .collect();

    let mut resolved = Vec::new();
    let mut unannotated = 0;
    for id in &review_set.question_ids {
        let Some(input) = by_id.get(id.as_str()) else {
            return Err(sentropy_core::Error::Invalid(format!("review set names unknown question `{id}`")).into());
        };
        let anns = per_question.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if anns.is_empty() {
            unannotated += 1;
            continue;
        }
        let lc_expert = match input.largest() {
            Some(k) => majority(
                anns.iter()
                    .map(|a| a.clusters.get(k).is_some_and(|c| c.equals_true_answer)),
            ),
            None => false,
        };
        resolved.push(Resolved {
            input,
            lp_expert: majority(anns.iter().map(|a| a.lp_correct())),
            lc_expert,
            success: majority(anns.iter().map(|a| a.clustering_success())),
            flawed: majority(anns.iter().map(|a| a.question_quality == QuestionQuality::Flawed)),
        });
    }

    let mut groups: BTreeMap<usize, Vec<&Resolved<'_>>> = BTreeMap::new();
    for r in &resolved {
        groups.entry(r.input.cluster_sizes.len()).or_default().push(r);
    }
    let by_cluster_count = groups.iter().map(|(&k, items)| cell(Some(k), items)).collect();
    let all: Vec<&Resolved<'_>> = resolved.iter().collect();
    let successes = resolved.iter().filter(|r| r.success).count();

    Ok(ExpertReport {
        review_set_size: review_set.question_ids.len(),
        annotated: resolved.len(),
        unannotated,
        reviewers: reviewers.len(),
        by_cluster_count,
        overall: cell(None, &all),
        se_auroc: expert_auroc(&resolved, |i| i.semantic_entropy, |r| r.lc_expert, config, "se")?,
        perplexity_auroc: expert_auroc(&resolved, |i| i.perplexity, |r| r.lp_expert, config, "perplexity")?,
        clustering_successes: successes,
        clustering_success_rate: (!resolved.is_empty()).then(|| successes as f64 / resolved.len() as f64),
        flawed_questions: resolved.iter().filter(|r| r.flawed).count(),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

/// Accuracy by cluster count for both selection methods and both scorers.
pub fn expert_table(report: &ExpertReport) -> Table {
    let mut t = Table::new(
        "Expert and automatic accuracy by cluster count",
        &["Clusters", "n", "LP expert", "LP LLM", "LC expert", "LC LLM"],
    );
    for c in report.by_cluster_count.iter().chain(std::iter::once(&report.overall)) {
        t.rows.push(vec![
            c.cluster_count.map_or_else(|| "Total".into(), |k| k.to_string()),
            c.n.to_string(),
            pct(c.lp_expert),
            pct(c.lp_llm),
            pct(c.lc_expert),
            pct(c.lc_llm),
        ]);
    }
    t.notes.push(format!(
        "Annotated {} of {} review questions by {} reviewer(s); {} unannotated excluded.",
        report.annotated, report.review_set_size, report.reviewers, report.unannotated
    ));
    t.notes.push(format!(
        "Clustering success: {} ({} of {}). Flawed questions: {}.",
        pct(report.clustering_success_rate),
        report.clustering_successes,
        report.annotated,
        report.flawed_questions
    ));
    t.notes.push(format!(
        "Expert-scored AUROC: SE {}, Perplexity {}",
        format_estimate(report.se_auroc),
        format_estimate(report.perplexity_auroc)
    ));
    t
}
