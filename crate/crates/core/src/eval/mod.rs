//! Accuracy and AUROC per metric and subgroup.

mod report;
pub mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use report::{definitions_table, format_estimate, overall_table, render_table, subgroup_table, Table};
pub use stats::{accuracy_ci, auroc, auroc_ci, roc_points, wilson, Estimate, RocPoint, DEFAULT_RESAMPLES, Z_95};

use crate::dataset::{Category, Part, Question};
use crate::error::{Error, Result};
use crate::metrics::UncertaintyScore;
use crate::scoring::{CorrectnessRecord, Definition, Method};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SemanticEntropy,
    DiscreteSemanticEntropy,
    Perplexity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [
        Metric::SemanticEntropy,
        Metric::DiscreteSemanticEntropy,
        Metric::Perplexity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::SemanticEntropy => "SE",
            Metric::DiscreteSemanticEntropy => "Discrete SE",
            Metric::Perplexity => "Perplexity",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::SemanticEntropy => "se",
            Metric::DiscreteSemanticEntropy => "discrete_se",
            Metric::Perplexity => "perplexity",
        }
    }

    /// Which selected answer this metric is judged against.
    pub fn method(self) -> Method {
        match self {
            Metric::Perplexity => Method::LowestPerplexity,
            _ => Method::LargestCluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBin {
    Short,
    Long,
}

/// Answers shorter than this many characters are short.
pub const SHORT_BELOW: usize = 15;
/// Answers longer than this many characters are long.
pub const LONG_ABOVE: usize = 60;

/// Length bin of an answer by trimmed character count; lengths 15 to 60
/// inclusive fall in neither bin.
pub fn length_bin(text: &str) -> Option<LengthBin> {
    let chars = text.trim().chars().count();
    if chars < SHORT_BELOW {
        Some(LengthBin::Short)
    } else if chars > LONG_ABOVE {
        Some(LengthBin::Long)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subgroup {
    All,
    Part { part: Part },
    Category { category: Category },
    Length { bin: LengthBin },
    Temperature { temperature: f64 },
}

impl Subgroup {
    pub fn label(&self) -> String {
        match self {
            Subgroup::All => "All".into(),
            Subgroup::Part { part } => part.label().into(),
            Subgroup::Category { category } => category.label().into(),
            Subgroup::Length { bin: LengthBin::Short } => format!("Short (<{SHORT_BELOW})"),
            Subgroup::Length { bin: LengthBin::Long } => format!("Long (>{LONG_ABOVE})"),
            Subgroup::Temperature { temperature } => format!("{temperature:.1}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupSpec {
    All,
    Part,
    Category,
    Length,
    Temperature,
}

impl SubgroupSpec {
    pub const ALL: [SubgroupSpec; 5] = [
        SubgroupSpec::All,
        SubgroupSpec::Part,
        SubgroupSpec::Category,
        SubgroupSpec::Length,
        SubgroupSpec::Temperature,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubgroupSpec::All => "all",
            SubgroupSpec::Part => "part",
            SubgroupSpec::Category => "category",
            SubgroupSpec::Length => "length",
            SubgroupSpec::Temperature => "temperature",
        }
    }
}

impl fmt::Display for SubgroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubgroupSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SubgroupSpec::ALL
            .into_iter()
            .find(|spec| spec.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown subgroup `{s}` (all, part, category, length, temperature)"
                ))
            })
    }
}

/// Scores and correctness outcomes of one question, flattened for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub question_id: String,
    pub part: Part,
    pub category: Category,
    pub temperature: f64,
    pub semantic_entropy: Option<f64>,
    pub discrete_semantic_entropy: f64,
    pub perplexity: Option<f64>,
    pub lowest_perplexity: Option<CorrectnessRecord>,
    pub largest_cluster: Vec<CorrectnessRecord>,
}

impl EvalRow {
    pub fn new(question: &Question, score: &UncertaintyScore, records: &[CorrectnessRecord], temperature: f64) -> Self {
        let mine = records.iter().filter(|r| r.question_id == question.id);
        let (lp, lc): (Vec<_>, Vec<_>) = mine.cloned().partition(|r| r.method == Method::LowestPerplexity);
        Self {
            question_id: question.id.clone(),
            part: question.part,
            category: question.category,
            temperature,
            semantic_entropy: score.semantic_entropy,
            discrete_semantic_entropy: score.discrete_semantic_entropy,
            perplexity: score.perplexity,
            lowest_perplexity: lp.into_iter().next(),
            largest_cluster: lc,
        }
    }

    pub fn uncertainty(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::SemanticEntropy => self.semantic_entropy,
            Metric::DiscreteSemanticEntropy => Some(self.discrete_semantic_entropy),
            Metric::Perplexity => self.perplexity,
        }
    }

    pub fn outcome(&self, metric: Metric, definition: Definition) -> Option<&CorrectnessRecord> {
        match metric.method() {
            Method::LowestPerplexity => self
                .lowest_perplexity
                .as_ref()
                .filter(|_| definition == Definition::Primary),
            Method::LargestCluster => self.largest_cluster.iter().find(|r| r.definition == definition),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub definition: Definition,
    pub subgroup: Subgroup,
    pub n: usize,
    pub accuracy: Option<Estimate>,
    /// Absent when either class has fewer than two members.
    pub auroc: Option<Estimate>,
    /// Mid-length answers left out of a length cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_excluded: Option<usize>,
}

/// Metrics every row can be evaluated on under `definition`.
pub fn available_metrics(rows: &[EvalRow], definition: Definition) -> Vec<Metric> {
    Metric::ALL
        .into_iter()
        .filter(|&m| {
            !rows.is_empty()
                && rows
                    .iter()
                    .all(|r| r.uncertainty(m).is_some() && r.outcome(m, definition).is_some())
        })
        .collect()
}

/// Accuracy and AUROC for one cell. Scores are negated uncertainties.
pub fn evaluate_cell(
    rows: &[&EvalRow],
    metric: Metric,
    definition: Definition,
    subgroup: Subgroup,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for row in rows {
        let (Some(u), Some(outcome)) = (row.uncertainty(metric), row.outcome(metric, definition)) else {
            return Err(Error::Invalid(format!(
                "`{}` has no {} score or {} outcome",
                row.question_id,
                metric.label(),
                definition.label()
            )));
        };
        scores.push(-u);
        labels.push(outcome.correct);
    }
    let accuracy = if labels.is_empty() {
        None
    } else {
        Some(accuracy_ci(&labels)?)
    };
    let positives = labels.iter().filter(|&&l| l).count();
    let auroc = if positives >= 2 && labels.len() - positives >= 2 {
        let seed = derive_seed(config.seed, &[metric.key(), &subgroup.label(), definition.label()]);
        Some(auroc_ci(&scores, &labels, config.resamples, seed)?)
    } else {
        None
    };
    Ok(EvalReport {
        metric,
        definition,
        subgroup,
        n: rows.len(),
        accuracy,
        auroc,
        length_excluded: None,
    })
}

fn cells(rows: &[EvalRow], spec: SubgroupSpec) -> Vec<(Subgroup, Vec<&EvalRow>)> {
    let pick = |f: &dyn Fn(&EvalRow) -> bool| rows.iter().filter(|r| f(r)).collect::<Vec<_>>();
    match spec {
        SubgroupSpec::All => vec![(Subgroup::All, rows.iter().collect())],
        SubgroupSpec::Part => [Part::PartOne, Part::PartTwo]
            .into_iter()
            .map(|part| (Subgroup::Part { part }, pick(&|r| r.part == part)))
            .collect(),
        SubgroupSpec::Category => {
            let mut cats = vec![Category::Knowledge, Category::Reasoning];
            if rows.iter().any(|r| r.category == Category::Unlabelled) {
                cats.push(Category::Unlabelled);
            }
            cats.into_iter()
                .map(|category| (Subgroup::Category { category }, pick(&|r| r.category == category)))
                .collect()
        }
        SubgroupSpec::Temperature => {
            let mut temps: Vec<f64> = rows.iter().map(|r| r.temperature).collect();
            temps.sort_by(f64::total_cmp);
            temps.dedup();
            temps
                .into_iter()
                .map(|t| (Subgroup::Temperature { temperature: t }, pick(&|r| r.temperature == t)))
                .collect()
        }
        SubgroupSpec::Length => unreachable!("length cells depend on the metric"),
    }
}

/// One report per (metric, cell) for the metrics available in `rows`.
/// Length cells bin each metric's own chosen answer.
pub fn stratify(
    rows: &[EvalRow],
    spec: SubgroupSpec,
    definition: Definition,
    config: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for metric in available_metrics(rows, definition) {
        if spec == SubgroupSpec::Length {
            let mut short = Vec::new();
            let mut long = Vec::new();
            let mut excluded = 0;
            for row in rows {
                let chosen = &row.outcome(metric, definition).expect("available").chosen_text;
                match length_bin(chosen) {
                    Some(LengthBin::Short) => short.push(row),
                    Some(LengthBin::Long) => long.push(row),
                    None => excluded += 1,
                }
            }
            for (bin, members) in [(LengthBin::Short, short), (LengthBin::Long, long)] {
                let mut report = evaluate_cell(&members, metric, definition, Subgroup::Length { bin }, config)?;
                report.length_excluded = Some(excluded);
                out.push(report);
            }
        } else {
            for (subgroup, members) in cells(rows, spec) {
                out.push(evaluate_cell(&members, metric, definition, subgroup, config)?);
            }
        }
    }
    Ok(out)
}

/// Reports for `specs` under the primary definition, then the overall cell
/// under each sensitivity definition.
pub fn evaluate(rows: &[EvalRow], specs: &[SubgroupSpec], config: &EvalConfig) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for &spec in specs {
        out.extend(stratify(rows, spec, Definition::Primary, config)?);
    }
    for definition in [Definition::Strict, Definition::Majority, Definition::Relaxed] {
        out.extend(stratify(rows, SubgroupSpec::All, definition, config)?);
    }
    Ok(out)
}

/// ROC curve of one metric over all rows, primary definition.
pub fn roc_for(rows: &[EvalRow], metric: Metric) -> Result<Vec<RocPoint>> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        if let (Some(u), Some(o)) = (row.uncertainty(metric), row.outcome(metric, Definition::Primary)) {
            scores.push(-u);
            labels.push(o.correct);
        }
    }
    roc_points(&scores, &labels)
}
