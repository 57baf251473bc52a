//! Correctness of the selected answer under the lowest-perplexity and
//! largest-cluster rules.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::dataset::Question;
use crate::entail::Entailer;
use crate::error::{Error, Result};
use crate::genclient::Generation;
use crate::metrics::UncertaintyScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LowestPerplexity,
    LargestCluster,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::LowestPerplexity => "lowest-perplexity",
            Method::LargestCluster => "largest-cluster",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definition {
    /// Lowest-perplexity member of the largest cluster must match.
    Primary,
    /// Every member of the largest cluster must match.
    Strict,
    /// More than half of the largest cluster must match.
    Majority,
    /// At least one member of the largest cluster must match.
    Relaxed,
}

impl Definition {
    pub const ALL: [Definition; 4] = [
        Definition::Primary,
        Definition::Strict,
        Definition::Majority,
        Definition::Relaxed,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Definition::Primary => "primary",
            Definition::Strict => "strict",
            Definition::Majority => "majority",
            Definition::Relaxed => "relaxed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessRecord {
    pub question_id: String,
    pub method: Method,
    pub definition: Definition,
    pub chosen_text: String,
    pub correct: bool,
    pub tie_broken_incorrect: bool,
}

/// Candidate with the lowest perplexity; ties go to the lowest index.
/// Candidates without a perplexity are skipped.
pub fn lowest_perplexity_index(
    per_sample: &[Option<f64>],
    candidates: impl IntoIterator<Item = usize>,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let Some(p) = per_sample.get(i).copied().flatten() else {
            continue;
        };
        match best {
            Some((bi, bp)) if bp < p || (bp == p && bi < i) => {}
            _ => best = Some((i, p)),
        }
    }
    best.map(|(i, _)| i)
}

fn text_of(gens: &[Generation], sample_index: usize) -> Result<&str> {
    gens.iter()
        .find(|g| g.sample_index == sample_index)
        .map(|g| g.text.as_str())
        .ok_or_else(|| Error::Invalid(format!("no generation with sample index {sample_index}")))
}

/// Bidirectional equivalence with the reference; blank answers never match.
fn matches_reference(text: &str, reference: &str, context: &str, entailer: &Entailer) -> Result<bool> {
    if text.trim().is_empty() || reference.trim().is_empty() {
        return Ok(false);
    }
    entailer.bidirectional(text, reference, context)
}

pub fn score_lowest_perplexity(
    gens: &[Generation],
    per_sample_perplexity: &[Option<f64>],
    reference: &str,
    context: &str,
    entailer: &Entailer,
) -> Result<CorrectnessRecord> {
    let question_id = gens
        .first()
        .map(|g| g.question_id.clone())
        .ok_or_else(|| Error::Invalid("no generations to score".into()))?;
    let chosen = lowest_perplexity_index(per_sample_perplexity, 0..per_sample_perplexity.len()).ok_or_else(|| {
        Error::Invalid(format!(
            "`{question_id}`: lowest-perplexity scoring needs token log-probabilities"
        ))
    })?;
    let chosen_text = text_of(gens, chosen)?.to_string();
    let correct = matches_reference(&chosen_text, reference, context, entailer)?;
    Ok(CorrectnessRecord {
        question_id,
        method: Method::LowestPerplexity,
        definition: Definition::Primary,
        chosen_text,
        correct,
        tie_broken_incorrect: false,
    })
}

/// Indices of the clusters sharing the maximal size.
pub fn largest_clusters(clustering: &Clustering) -> Vec<usize> {
    let max = clustering.clusters.iter().map(Vec::len).max().unwrap_or(0);
    (0..clustering.clusters.len())
        .filter(|&c| clustering.clusters[c].len() == max)
        .collect()
}

/// Largest-cluster scoring under several definitions at once. Judge verdicts
/// are shared through the entailer cache.
pub fn score_largest_cluster_all(
    gens: &[Generation],
    clustering: &Clustering,
    per_sample_perplexity: &[Option<f64>],
    reference: &str,
    context: &str,
    entailer: &Entailer,
    definitions: &[Definition],
) -> Result<Vec<CorrectnessRecord>> {
    let largest = largest_clusters(clustering);
    let record = |definition, chosen_text: &str, correct, tie| CorrectnessRecord {
        question_id: clustering.question_id.clone(),
        method: Method::LargestCluster,
        definition,
        chosen_text: chosen_text.to_string(),
        correct,
        tie_broken_incorrect: tie,
    };
    // Lowest-perplexity member, falling back to the earliest member when no
    // perplexities are available.
    let pick = |members: &mut dyn Iterator<Item = usize>| -> Result<usize> {
        let members: Vec<usize> = members.collect();
        lowest_perplexity_index(per_sample_perplexity, members.iter().copied())
            .or_else(|| members.iter().copied().min())
            .ok_or_else(|| Error::Invalid(format!("`{}`: empty clustering", clustering.question_id)))
    };

    if largest.len() != 1 {
        let mut tied = largest.iter().flat_map(|&c| clustering.clusters[c].iter().copied());
        let chosen = text_of(gens, pick(&mut tied)?)?;
        return Ok(definitions.iter().map(|&d| record(d, chosen, false, true)).collect());
    }

    let members = &clustering.clusters[largest[0]];
    let primary = pick(&mut members.iter().copied())?;
    let primary_text = text_of(gens, primary)?;
    let mut matched: Vec<Option<bool>> = vec![None; members.len()];
    let mut member_matches = |k: usize| -> Result<bool> {
        if let Some(m) = matched[k] {
            return Ok(m);
        }
        let m = matches_reference(text_of(gens, members[k])?, reference, context, entailer)?;
        matched[k] = Some(m);
        Ok(m)
    };

    let mut out = Vec::with_capacity(definitions.len());
    for &definition in definitions {
        let correct = match definition {
            Definition::Primary => {
                let k = members.iter().position(|&i| i == primary).expect("primary is a member");
                member_matches(k)?
            }
            Definition::Strict | Definition::Majority | Definition::Relaxed => {
                let mut hits = 0;
                for k in 0..members.len() {
                    hits += usize::from(member_matches(k)?);
                }
                match definition {
                    Definition::Strict => hits == members.len(),
                    Definition::Majority => 2 * hits > members.len(),
                    _ => hits > 0,
                }
            }
        };
        out.push(record(definition, primary_text, correct, false));
    }
    Ok(out)
}

pub fn score_largest_cluster(
    gens: &[Generation],
    clustering: &Clustering,
    per_sample_perplexity: &[Option<f64>],
    reference: &str,
    context: &str,
    entailer: &Entailer,
    definition: Definition,
) -> Result<CorrectnessRecord> {
    let mut records = score_largest_cluster_all(
        gens,
        clustering,
        per_sample_perplexity,
        reference,
        context,
        entailer,
        &[definition],
    )?;
    Ok(records.remove(0))
}

/// Everything the scorer needs for one question.
#[derive(Debug, Clone, Copy)]
pub struct QuestionArtifacts<'a> {
    pub question: &'a Question,
    pub generations: &'a [Generation],
    pub clustering: &'a Clustering,
    pub score: &'a UncertaintyScore,
}

/// Records for every eligible question, sorted by question id, method and
/// definition. Runs without log-probabilities get no lowest-perplexity
/// records.
pub fn score_all(items: &[QuestionArtifacts<'_>], entailer: &Entailer) -> Result<Vec<CorrectnessRecord>> {
    let per_question: Vec<Vec<CorrectnessRecord>> = items
        .par_iter()
        .filter(|a| a.question.is_eligible())
        .map(|a| {
            let q = a.question;
            let mut records = Vec::with_capacity(5);
            if !a.score.logprob_free {
                records.push(score_lowest_perplexity(
                    a.generations,
                    &a.score.per_sample_perplexity,
                    &q.reference_answer,
                    &q.text,
                    entailer,
                )?);
            }
            records.extend(score_largest_cluster_all(
                a.generations,
                a.clustering,
                &a.score.per_sample_perplexity,
                &q.reference_answer,
                &q.text,
                entailer,
                &Definition::ALL,
            )?);
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<CorrectnessRecord> = per_question.into_iter().flatten().collect();
    records.sort_by(|a, b| (&a.question_id, a.method, a.definition).cmp(&(&b.question_id, b.method, b.definition)));
    Ok(records)
}

fn mark(correct: bool) -> &'static str {
    if correct {
        "correct"
    } else {
        "incorrect"
    }
}

/// Plain-text per-question summary of the scoring stage.
pub fn render_digest(items: &[QuestionArtifacts<'_>], records: &[CorrectnessRecord]) -> String {
    let mut out = String::new();
    for a in items.iter().filter(|a| a.question.is_eligible()) {
        let q = a.question;
        let _ = writeln!(out, "== {} ({}, {})", q.id, q.part.label(), q.category.label());
        let _ = writeln!(out, "Q: {}", q.text);
        let _ = writeln!(out, "Reference: {}", q.reference_answer);
        let sizes: Vec<String> = a.clustering.clusters.iter().map(|c| c.len().to_string()).collect();
        let _ = writeln!(
            out,
            "Clusters (K={}): sizes [{}]",
            a.clustering.cluster_count(),
            sizes.join(", ")
        );
        for r in records.iter().filter(|r| r.question_id == q.id) {
            let tie = if r.tie_broken_incorrect {
                " (tied largest clusters)"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{} / {}: {}{} <- {}",
                r.method.label(),
                r.definition.label(),
                mark(r.correct),
                tie,
                r.chosen_text
            );
        }
        out.push('\n');
    }
    out
}
