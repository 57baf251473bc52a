//! Stage drivers: ingest, generate, cluster, metrics, score, evaluate, report.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::cluster::{cluster_generations, Clustering};
use crate::config::{config_digest, default_run_id, resolve_created_at, PipelineConfig};
use crate::dataset::{corpus_to_string, load_corpus, Category, Question};
use crate::entail::{Entailer, LlmJudge, OracleJudge};
use crate::error::{Error, Result};
use crate::eval::{
    definitions_table, evaluate, overall_table, roc_for, stratify, subgroup_table, EvalConfig, EvalReport, EvalRow,
    Metric, Subgroup, SubgroupSpec,
};
use crate::genclient::{classify_question, generate_answers, Generation, GenerationBackend};
use crate::metrics::{score_question, UncertaintyScore};
use crate::run::{RunDir, RunManifest, Stage, MANIFEST_FILE, RUN_SCHEMA_VERSION};
use crate::scoring::{render_digest, score_all, CorrectnessRecord, Definition, QuestionArtifacts};
use crate::util::sha256_hex;

pub const DIGEST_FILE: &str = "score_digest.txt";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Completed {
        records: usize,
    },
    /// The stage was already complete and no overwrite was requested.
    AlreadyComplete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub run_path: PathBuf,
    pub run_id: String,
    pub loaded: usize,
    pub eligible: usize,
    pub classified: usize,
    /// An identical run already existed and was left untouched.
    pub reused: bool,
}

/// Loads and validates the corpus, optionally classifies unlabelled
/// questions, and creates the run directory.
pub fn ingest(
    corpus_path: &Path,
    runs_root: &Path,
    config: &PipelineConfig,
    classifier: Option<&dyn GenerationBackend>,
    overwrite: bool,
) -> Result<IngestSummary> {
    config.validate()?;
    let mut questions = load_corpus(corpus_path)?;
    let mut classified = 0;
    if let Some(backend) = classifier {
        let labels: Vec<(usize, Category)> = questions
            .par_iter()
            .enumerate()
            .filter(|(_, q)| q.is_eligible() && q.category == Category::Unlabelled)
            .map(|(i, q)| Ok((i, classify_question(q, &config.generation.model_id, backend)?)))
            .collect::<Result<_>>()?;
        classified = labels.len();
        for (i, c) in labels {
            questions[i].category = c;
        }
    }

    let corpus_hash = sha256_hex(corpus_to_string(&questions));
    let digest = config_digest(&config.generation, &config.run);
    let run_id = config
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(&corpus_hash, &digest));
    let run_path = runs_root.join(&run_id);
    let summary = |reused| IngestSummary {
        run_path: run_path.clone(),
        run_id: run_id.clone(),
        loaded: questions.len(),
        eligible: questions.iter().filter(|q| q.is_eligible()).count(),
        classified,
        reused,
    };

    if run_path.join(MANIFEST_FILE).exists() {
        let existing = RunDir::open(&run_path)?;
        let same = existing.manifest().corpus_hash == corpus_hash && existing.manifest().config_digest == digest;
        if !overwrite {
            if same {
                return Ok(summary(true));
            }
            return Err(Error::Config(format!(
                "run {} exists with a different corpus or configuration; pass overwrite or pick another run id",
                run_path.display()
            )));
        }
        drop(existing);
        crate::run::RunLock::acquire(&run_path).map(drop)?;
        std::fs::remove_dir_all(&run_path).map_err(|e| Error::io(&run_path, e))?;
    }

    let manifest = RunManifest {
        schema_version: RUN_SCHEMA_VERSION,
        run_id: run_id.clone(),
        corpus_hash: corpus_hash.clone(),
        config_digest: digest,
        generation_config: config.generation.clone(),
        settings: config.run.clone(),
        created_at: resolve_created_at(config.created_at.as_deref())?,
        stage_status: BTreeMap::new(),
    };
    RunDir::create(&run_path, manifest, &questions)?;
    Ok(summary(false))
}

/// Builds the entailment front end named by the run's judge setting.
/// `llm` needs a backend.
pub fn build_entailer(run: &RunDir, backend: Option<Arc<dyn GenerationBackend>>) -> Result<Entailer> {
    let settings = &run.manifest().settings;
    if settings.judge == "llm" {
        let backend = backend.ok_or_else(|| Error::Config("the llm judge needs a generation backend".into()))?;
        let g = &run.manifest().generation_config;
        let judge = LlmJudge::new(backend, g.model_id.clone(), g.entailment_temperature)?;
        Ok(Entailer::new(Arc::new(judge)))
    } else {
        Ok(Entailer::oracle(OracleJudge::from_rule(&settings.judge)?))
    }
}

fn pool(run: &RunDir) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(run.manifest().settings.max_in_flight)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn skip_if_complete(run: &RunDir, stage: Stage, overwrite: bool) -> Result<bool> {
    run.check_ready(stage)?;
    Ok(run.manifest().is_complete(stage) && !overwrite)
}

pub fn run_generate(run: &mut RunDir, backend: &dyn GenerationBackend, overwrite: bool) -> Result<StageOutcome> {
    if skip_if_complete(run, Stage::Generate, overwrite)? {
        return Ok(StageOutcome::AlreadyComplete);
    }
    let config = run.manifest().generation_config.clone();
    let questions: Vec<&Question> = run.eligible().collect();
    let per_question: Vec<Vec<Generation>> = pool(run)?.install(|| {
        questions
            .par_iter()
            .map(|q| generate_answers(q, &config, backend))
            .collect::<Result<_>>()
    })?;
    let records: Vec<Generation> = per_question.into_iter().flatten().collect();
    run.persist_stage(Stage::Generate, &records, true)?;
    Ok(StageOutcome::Completed { records: records.len() })
}

fn group_generations(run: &RunDir) -> Result<HashMap<String, Vec<Generation>>> {
    let mut grouped: HashMap<String, Vec<Generation>> = HashMap::new();
    for g in run.read_stage::<Generation>(Stage::Generate)? {
        grouped.entry(g.question_id.clone()).or_default().push(g);
    }
    Ok(grouped)
}

fn by_question<T>(run: &RunDir, stage: Stage, id: impl Fn(&T) -> &str) -> Result<HashMap<String, T>>
where
    T: serde::de::DeserializeOwned,
{
    Ok(run
        .read_stage::<T>(stage)?
        .into_iter()
        .map(|r| (id(&r).to_string(), r))
        .collect())
}

fn missing(stage: Stage, id: &str) -> Error {
    Error::Invalid(format!("{stage} stage has no record for question `{id}`"))
}

pub fn run_cluster(run: &mut RunDir, entailer: &Entailer, overwrite: bool) -> Result<StageOutcome> {
    if skip_if_complete(run, Stage::Cluster, overwrite)? {
        return Ok(StageOutcome::AlreadyComplete);
    }
    let gens = group_generations(run)?;
    let questions: Vec<&Question> = run.eligible().collect();
    let records: Vec<Clustering> = pool(run)?.install(|| {
        questions
            .par_iter()
            .map(|q| {
                let g = gens.get(&q.id).ok_or_else(|| missing(Stage::Generate, &q.id))?;
                cluster_generations(g, &q.text, entailer)
            })
            .collect::<Result<_>>()
    })?;
    run.persist_stage(Stage::Cluster, &records, true)?;
    Ok(StageOutcome::Completed { records: records.len() })
}

pub fn run_metrics(run: &mut RunDir, overwrite: bool) -> Result<StageOutcome> {
    if skip_if_complete(run, Stage::Metrics, overwrite)? {
        return Ok(StageOutcome::AlreadyComplete);
    }
    let gens = group_generations(run)?;
    let clusterings = by_question(run, Stage::Cluster, |c: &Clustering| &c.question_id)?;
    let mode = run.manifest().generation_config.logprob_mode;
    let records: Vec<UncertaintyScore> = run
        .eligible()
        .map(|q| {
            let g = gens.get(&q.id).ok_or_else(|| missing(Stage::Generate, &q.id))?;
            let c = clusterings.get(&q.id).ok_or_else(|| missing(Stage::Cluster, &q.id))?;
            score_question(g, c, mode)
        })
        .collect::<Result<_>>()?;
    run.persist_stage(Stage::Metrics, &records, true)?;
    Ok(StageOutcome::Completed { records: records.len() })
}

pub fn run_score(run: &mut RunDir, entailer: &Entailer, overwrite: bool) -> Result<StageOutcome> {
    if skip_if_complete(run, Stage::Score, overwrite)? {
        return Ok(StageOutcome::AlreadyComplete);
    }
    let gens = group_generations(run)?;
    let clusterings = by_question(run, Stage::Cluster, |c: &Clustering| &c.question_id)?;
    let scores = by_question(run, Stage::Metrics, |s: &UncertaintyScore| &s.question_id)?;
    let items: Vec<QuestionArtifacts<'_>> = run
        .eligible()
        .map(|q| {
            Ok(QuestionArtifacts {
                question: q,
                generations: gens.get(&q.id).ok_or_else(|| missing(Stage::Generate, &q.id))?,
                clustering: clusterings.get(&q.id).ok_or_else(|| missing(Stage::Cluster, &q.id))?,
                score: scores.get(&q.id).ok_or_else(|| missing(Stage::Metrics, &q.id))?,
            })
        })
        .collect::<Result<_>>()?;
    let records = pool(run)?.install(|| score_all(&items, entailer))?;
    let digest = render_digest(&items, &records);
    run.persist_stage(Stage::Score, &records, true)?;
    run.write_aux(DIGEST_FILE, digest.as_bytes())?;
    Ok(StageOutcome::Completed { records: records.len() })
}

/// Flattened evaluation rows, in corpus order. Needs metrics and score.
pub fn eval_rows(run: &RunDir) -> Result<Vec<EvalRow>> {
    let scores = by_question(run, Stage::Metrics, |s: &UncertaintyScore| &s.question_id)?;
    let records: Vec<CorrectnessRecord> = run.read_stage(Stage::Score)?;
    let mut by_id: HashMap<&str, Vec<CorrectnessRecord>> = HashMap::new();
    for r in &records {
        by_id.entry(r.question_id.as_str()).or_default().push(r.clone());
    }
    let temperature = run.manifest().generation_config.answer_temperature;
    run.eligible()
        .map(|q| {
            let s = scores.get(&q.id).ok_or_else(|| missing(Stage::Metrics, &q.id))?;
            let recs = by_id.get(q.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            Ok(EvalRow::new(q, s, recs, temperature))
        })
        .collect()
}

pub fn eval_config(run: &RunDir) -> EvalConfig {
    let s = &run.manifest().settings;
    EvalConfig {
        resamples: s.bootstrap_resamples,
        seed: s.seed,
    }
}

pub fn run_evaluate(run: &mut RunDir, overwrite: bool) -> Result<StageOutcome> {
    if skip_if_complete(run, Stage::Evaluate, overwrite)? {
        return Ok(StageOutcome::AlreadyComplete);
    }
    let rows = eval_rows(run)?;
    let config = eval_config(run);
    let reports = evaluate(&rows, &run.manifest().settings.subgroups, &config)?;
    let mut roc_files = Vec::new();
    for metric in Metric::ALL {
        if rows.iter().any(|r| r.uncertainty(metric).is_none()) {
            continue;
        }
        match roc_for(&rows, metric) {
            Ok(points) => {
                let mut csv = String::from("threshold,fpr,tpr\n");
                for p in points {
                    csv.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
                }
                roc_files.push((format!("roc_{}.csv", metric.key()), csv));
            }
            Err(Error::AurocUndefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    run.persist_stage(Stage::Evaluate, &reports, true)?;
    for (name, csv) in roc_files {
        run.write_aux(&name, csv.as_bytes())?;
    }
    Ok(StageOutcome::Completed { records: reports.len() })
}

/// Plain-text tables from the evaluate stage. With `compare`, the
/// temperature table spans both runs.
pub fn render_report(run: &RunDir, compare: Option<&RunDir>) -> Result<String> {
    let reports: Vec<EvalReport> = run.read_stage(Stage::Evaluate)?;
    let mut rows = eval_rows(run)?;
    if let Some(other) = compare {
        rows.extend(eval_rows(other)?);
    }
    let temperature = stratify(&rows, SubgroupSpec::Temperature, Definition::Primary, &eval_config(run))?;

    let m = run.manifest();
    let mut out = format!(
        "Run {}  (model {}, M={}, temperature {}, corpus {})\n\n",
        m.run_id,
        m.generation_config.model_id,
        m.generation_config.num_samples,
        m.generation_config.answer_temperature,
        &m.corpus_hash[..12]
    );
    let tables = [
        overall_table("Overall performance", &reports),
        subgroup_table("Performance by exam part", "Part", &reports, |s| {
            matches!(s, Subgroup::Part { .. })
        }),
        subgroup_table("Performance by question category", "Category", &reports, |s| {
            matches!(s, Subgroup::Category { .. })
        }),
        subgroup_table("Performance by answer length", "Length", &reports, |s| {
            matches!(s, Subgroup::Length { .. })
        }),
        subgroup_table(
            "Performance by sampling temperature",
            "Temperature",
            &temperature,
            |s| matches!(s, Subgroup::Temperature { .. }),
        ),
        definitions_table("Largest-cluster correctness definitions", &reports),
    ];
    for t in tables {
        if t.rows.is_empty() {
            continue;
        }
        out.push_str(&t.render());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{write_corpus, Part};
    use crate::genclient::SimulatedBackend;

    fn corpus() -> Vec<Question> {
        (0..6)
            .map(|i| Question {
                id: format!("t{i}"),
                part: if i < 3 { Part::PartOne } else { Part::PartTwo },
                domain: "Obstetrics".into(),
                category: if i % 2 == 0 {
                    Category::Knowledge
                } else {
                    Category::Unlabelled
                },
                text: format!("Question {i}?"),
                reference_answer: ["Oxytocin", "Methotrexate", "Folic acid"][i % 3].into(),
                excluded: None,
            })
            .collect()
    }

    fn config() -> PipelineConfig {
        let mut c = PipelineConfig {
            created_at: Some("2024-01-01T00:00:00Z".into()),
            ..Default::default()
        };
        c.run.bootstrap_resamples = 50;
        c
    }

    #[test]
    fn stages_run_in_order_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("c.jsonl");
        write_corpus(&corpus_path, &corpus()).unwrap();
        let backend = SimulatedBackend::new(&corpus(), 3);
        let s = ingest(&corpus_path, dir.path(), &config(), Some(&backend), false).unwrap();
        assert_eq!((s.loaded, s.eligible, s.classified, s.reused), (6, 6, 3, false));
        assert!(
            ingest(&corpus_path, dir.path(), &config(), Some(&backend), false)
                .unwrap()
                .reused
        );

        let mut run = RunDir::open_locked(&s.run_path).unwrap();
        assert!(run.eligible().all(|q| q.category != Category::Unlabelled));
        let e = build_entailer(&run, None).unwrap();
        let err = run_cluster(&mut run, &e, false).unwrap_err();
        assert_eq!(err.to_string(), "stage `cluster` cannot run: generate pending");

        assert_eq!(
            run_generate(&mut run, &backend, false).unwrap(),
            StageOutcome::Completed { records: 60 }
        );
        assert_eq!(
            run_generate(&mut run, &backend, false).unwrap(),
            StageOutcome::AlreadyComplete
        );
        run_cluster(&mut run, &e, false).unwrap();
        run_metrics(&mut run, false).unwrap();
        assert_eq!(
            run_score(&mut run, &e, false).unwrap(),
            StageOutcome::Completed { records: 30 }
        );
        run_evaluate(&mut run, false).unwrap();
        let report = render_report(&run, None).unwrap();
        assert!(report.contains("Overall performance"));
        assert!(report.contains("Performance by exam part"));
        assert!(run.read_aux(DIGEST_FILE).unwrap().unwrap().contains("== t0"));
    }

    #[test]
    fn llm_judge_requires_backend() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("c.jsonl");
        write_corpus(&corpus_path, &corpus()).unwrap();
        let mut cfg = config();
        cfg.run.judge = "llm".into();
        let s = ingest(&corpus_path, dir.path(), &cfg, None, false).unwrap();
        let run = RunDir::open(&s.run_path).unwrap();
        assert!(matches!(build_entailer(&run, None), Err(Error::Config(_))));
    }

    #[test]
    fn conflicting_ingest_needs_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("c.jsonl");
        write_corpus(&corpus_path, &corpus()).unwrap();
        let mut cfg = config();
        cfg.run_id = Some("fixed".into());
        ingest(&corpus_path, dir.path(), &cfg, None, false).unwrap();
        cfg.run.seed = 9;
        assert!(matches!(
            ingest(&corpus_path, dir.path(), &cfg, None, false),
            Err(Error::Config(_))
        ));
        let s = ingest(&corpus_path, dir.path(), &cfg, None, true).unwrap();
        assert_eq!(RunDir::open(&s.run_path).unwrap().manifest().settings.seed, 9);
    }
}
