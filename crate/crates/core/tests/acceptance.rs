//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the terminal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentropy_core::cluster::cluster_generations;
use sentropy_core::dataset::write_corpus;
use sentropy_core::eval::{auroc, auroc_ci, evaluate, wilson, SubgroupSpec, Z_95};
use sentropy_core::genclient::simulated::synthetic_corpus;
use sentropy_core::genclient::SimulatedBackend;
use sentropy_core::metrics::{discrete_semantic_entropy, semantic_entropy};
use sentropy_core::pipeline::{
    build_entailer, eval_config, eval_rows, ingest, render_report, run_cluster, run_evaluate, run_generate,
    run_metrics, run_score,
};
use sentropy_core::scoring::score_largest_cluster_all;
use sentropy_core::{
    Clustering, Definition, Entailer, EvalReport, Generation, Metric, OracleJudge, PipelineConfig, RunDir,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_labels(rng: &mut ChaCha8Rng, m: usize) -> Vec<usize> {
    let k = rng.random_range(1..=m);
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

/// Clusters in first-occurrence order, members ascending.
fn partition(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if !groups.contains_key(&l) {
            order.push(l);
        }
        groups.entry(l).or_default().push(i);
    }
    order.into_iter().map(|l| groups.remove(&l).unwrap()).collect()
}

fn clustering(clusters: Vec<Vec<usize>>) -> Clustering {
    Clustering {
        question_id: "q".into(),
        representatives: clusters.iter().map(|c| c[0]).collect(),
        clusters,
        verdict_log: Vec::new(),
    }
}

fn generations(texts: &[String], logprobs: &[Vec<f64>]) -> Vec<Generation> {
    texts
        .iter()
        .zip(logprobs)
        .enumerate()
        .map(|(i, (t, lp))| Generation {
            question_id: "q".into(),
            sample_index: i,
            text: t.clone(),
            token_logprobs: lp.clone(),
            temperature: 1.0,
        })
        .collect()
}

fn entropy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=10);
        let parts = partition(&random_labels(&mut rng, m));
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        let direct: f64 = -sizes
            .iter()
            .map(|&c| {
                let p = c as f64 / m as f64;
                p * p.ln()
            })
            .sum::<f64>();
        let got = discrete_semantic_entropy(&sizes).map_err(|e| e.to_string())?;
        worst = worst.max((got - direct).abs());

        let lp = -rng.random_range(0.01..3.0);
        let tokens: Vec<Vec<f64>> = (0..m).map(|_| vec![lp; rng.random_range(1..5)]).collect();
        let texts: Vec<String> = (0..m).map(|i| format!("t{i}")).collect();
        let se = semantic_entropy(&generations(&texts, &tokens), &clustering(parts)).map_err(|e| e.to_string())?;
        worst = worst.max((se - got).abs());
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 partitions, max deviation {worst:.1e}"))
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_auroc(&scores, &labels)).abs());
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let example = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    check(example == 0.75, || format!("worked example gave {example}"))?;
    Ok(format!("200 instances, max deviation {worst:.1e}, example {example}"))
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..500 {
        let m = rng.random_range(1..=10);
        let labels = random_labels(&mut rng, m);
        let texts: Vec<String> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| format!("class {l} variant {i}"))
            .collect();
        let judge = OracleJudge::from_classes(texts.iter().map(String::as_str).zip(labels.iter().copied()));
        let e = Entailer::oracle(judge);
        let gens = generations(&texts, &vec![vec![-0.1]; m]);
        let got = cluster_generations(&gens, "q", &e).map_err(|e| e.to_string())?;
        let want = partition(&labels);
        check(got.clusters == want, || {
            format!("case {case}: got {:?}, planted {want:?}", got.clusters)
        })?;
    }
    Ok("500 planted partitions recovered".into())
}

fn definition_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut violations, mut ties) = (0, 0);
    for _ in 0..500 {
        let k = rng.random_range(1..=4);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3)).collect();
        let m: usize = sizes.iter().sum();
        let matches: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let texts: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
        let mut pairs = Vec::new();
        for (t, &hit) in texts.iter().zip(&matches) {
            if hit {
                pairs.push((t.clone(), "ref".to_string()));
                pairs.push(("ref".to_string(), t.clone()));
            }
        }
        let mut next = 0;
        let c = clustering(
            sizes
                .iter()
                .map(|&s| {
                    let v: Vec<usize> = (next..next + s).collect();
                    next += s;
                    v
                })
                .collect(),
        );
        let per: Vec<Option<f64>> = (0..m).map(|_| Some(rng.random_range(1.0..3.0))).collect();
        let gens = generations(&texts, &vec![vec![-0.2]; m]);
        let e = Entailer::oracle(OracleJudge::scripted(pairs));
        let recs =
            score_largest_cluster_all(&gens, &c, &per, "ref", "q", &e, &Definition::ALL).map_err(|e| e.to_string())?;
        let get = |d: Definition| recs.iter().find(|r| r.definition == d).unwrap().correct;
        let (s, mj, r) = (
            get(Definition::Strict),
            get(Definition::Majority),
            get(Definition::Relaxed),
        );
        if (s && !mj) || (mj && !r) {
            violations += 1;
        }
        let max = *sizes.iter().max().unwrap();
        if sizes.iter().filter(|&&x| x == max).count() > 1 {
            ties += 1;
            if recs.iter().any(|r| r.correct || !r.tie_broken_incorrect) || e.judge_calls() != 0 {
                violations += 1;
            }
        }
    }
    check(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("500 scenarios ({ties} tied), 0 violations"))
}

fn config(seed: u64, temperature: f64, resamples: usize) -> PipelineConfig {
    let mut c = PipelineConfig {
        created_at: Some("2024-01-01T00:00:00Z".into()),
        ..Default::default()
    };
    c.run.seed = seed;
    c.run.bootstrap_resamples = resamples;
    c.generation.answer_temperature = temperature;
    c
}

fn run_pipeline(corpus: &Path, root: &Path, config: &PipelineConfig) -> Result<RunDir, String> {
    let questions = sentropy_core::dataset::load_corpus(corpus).map_err(|e| e.to_string())?;
    let backend = SimulatedBackend::with_params(&questions, config.run.seed, &config.run.simulation);
    let s = ingest(corpus, root, config, None, false).map_err(|e| e.to_string())?;
    let mut run = RunDir::open_locked(&s.run_path).map_err(|e| e.to_string())?;
    let e = build_entailer(&run, None).map_err(|e| e.to_string())?;
    let step = |r: sentropy_core::Result<_>| r.map(drop).map_err(|e| e.to_string());
    step(run_generate(&mut run, &backend, false))?;
    step(run_cluster(&mut run, &e, false))?;
    step(run_metrics(&mut run, false))?;
    step(run_score(&mut run, &e, false))?;
    Ok(run)
}

fn overall_auroc(run: &RunDir, metric: Metric) -> Result<f64, String> {
    let rows = eval_rows(run).map_err(|e| e.to_string())?;
    let reports: Vec<EvalReport> =
        evaluate(&rows, &[SubgroupSpec::All], &eval_config(run)).map_err(|e| e.to_string())?;
    reports
        .iter()
        .find(|r| r.metric == metric && r.definition == Definition::Primary)
        .and_then(|r| r.auroc)
        .map(|e| e.point)
        .ok_or_else(|| format!("no AUROC for {}", metric.label()))
}

fn synthetic_experiment() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("synthetic.jsonl");
    write_corpus(&corpus, &synthetic_corpus(500, 17)).map_err(|e| e.to_string())?;
    let high = run_pipeline(&corpus, &dir.path().join("t10"), &config(17, 1.0, 100))?;
    let low = run_pipeline(&corpus, &dir.path().join("t02"), &config(17, 0.2, 100))?;
    let se_high = overall_auroc(&high, Metric::SemanticEntropy)?;
    let pp_high = overall_auroc(&high, Metric::Perplexity)?;
    let se_low = overall_auroc(&low, Metric::SemanticEntropy)?;
    let detail = format!("SE {se_high:.3} vs perplexity {pp_high:.3} at T=1.0; SE {se_low:.3} at T=0.2");
    check(se_high - pp_high >= 0.05, || format!("gap below 0.05: {detail}"))?;
    check(se_high >= se_low, || {
        format!("SE not higher at high dispersion: {detail}")
    })?;
    Ok(detail)
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_corpus.jsonl");
    let mut snapshots = Vec::new();
    let mut report = String::new();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for attempt in ["a", "b"] {
        let root = dir.path().join(attempt);
        let mut run = run_pipeline(&corpus, &root, &config(7, 1.0, 500))?;
        run_evaluate(&mut run, false).map_err(|e| e.to_string())?;
        report = render_report(&run, None).map_err(|e| e.to_string())?;
        run.write_aux("report.txt", report.as_bytes())
            .map_err(|e| e.to_string())?;
        let path = run.path().to_path_buf();
        drop(run);
        snapshots.push(files(&path));
    }
    check(snapshots[0] == snapshots[1], || {
        let differing: Vec<_> = snapshots[0]
            .iter()
            .filter(|(k, v)| snapshots[1].get(*k) != Some(v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        format!("run directories differ: {differing:?}")
    })?;
    let eligible = 20;
    check(report.contains(&format!("SE           {eligible}")), || {
        "overall table lacks n=20".into()
    })?;
    for header in [
        "Metric       n   Accuracy (95% CI)    AUROC (95% CI)",
        "Metric       Part    n   Accuracy (95% CI)    AUROC (95% CI)",
        "Metric       Category    n  Accuracy (95% CI)    AUROC (95% CI)",
        "Metric       Temperature  n   Accuracy (95% CI)    AUROC (95% CI)",
    ] {
        check(report.contains(header), || format!("report lacks `{header}`"))?;
    }
    Ok(format!("{} files identical across two runs", snapshots[0].len()))
}

fn wilson_and_bootstrap() -> Outcome {
    let e = wilson(50, 100, Z_95);
    let closed = |sign: f64| {
        let (n, p, z) = (100.0f64, 0.5f64, Z_95);
        (p + z * z / (2.0 * n) + sign * z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt()) / (1.0 + z * z / n)
    };
    check(
        (e.lower - 0.403).abs() <= 5e-3 && (e.upper - 0.597).abs() <= 5e-3,
        || format!("{e:?}"),
    )?;
    check(
        (e.lower - closed(-1.0)).abs() < 1e-12 && (e.upper - closed(1.0)).abs() < 1e-12,
        || format!("{e:?} vs closed form"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let labels: Vec<bool> = (0..300).map(|_| rng.random_bool(0.4)).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| rng.random::<f64>() + if l { 0.4 } else { 0.0 })
        .collect();
    let a = auroc_ci(&scores, &labels, 2000, 9).map_err(|e| e.to_string())?;
    let b = auroc_ci(&scores, &labels, 2000, 9).map_err(|e| e.to_string())?;
    check(a == b, || format!("{a:?} != {b:?}"))?;
    Ok(format!(
        "Wilson ({:.4}, {:.4}); bootstrap {:.3} ({:.3}-{:.3}) repeated exactly",
        e.lower, e.upper, a.point, a.lower, a.upper
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("entropy oracle equivalence", Duration::from_secs(5), entropy_oracle),
        ("AUROC oracle equivalence", Duration::from_secs(10), auroc_oracle),
        (
            "clustering oracle equivalence",
            Duration::from_secs(5),
            clustering_oracle,
        ),
        (
            "correctness-definition ordering",
            Duration::from_secs(5),
            definition_ordering,
        ),
        (
            "synthetic calibration experiment",
            Duration::from_secs(120),
            synthetic_experiment,
        ),
        ("end-to-end reproducibility", Duration::from_secs(30), end_to_end),
        (
            "Wilson CI and bootstrap determinism",
            Duration::from_secs(5),
            wilson_and_bootstrap,
        ),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
