//! Greedy semantic clustering by bidirectional entailment.

use serde::{Deserialize, Serialize};

use crate::entail::{Entailer, EntailmentVerdict};
use crate::error::{Error, Result};
use crate::genclient::Generation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub question_id: String,
    /// Member sample indices per cluster, clusters in creation order and
    /// members ascending.
    pub clusters: Vec<Vec<usize>>,
    /// First-assigned member of each cluster.
    pub representatives: Vec<usize>,
    pub verdict_log: Vec<EntailmentVerdict>,
}

impl Clustering {
    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_samples(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Index of the cluster holding `sample_index`.
    pub fn cluster_of(&self, sample_index: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&sample_index))
    }

    /// Checks that clusters partition `0..m` and representatives are members.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for cluster in &self.clusters {
            if cluster.is_empty() {
                return Err(Error::Invalid(format!("{}: empty cluster", self.question_id)));
            }
            for &i in cluster {
                if i >= m || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Invalid(format!(
                        "{}: sample {i} out of range or assigned twice",
                        self.question_id
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "{}: sample {missing} unassigned",
                self.question_id
            )));
        }
        if self.representatives.len() != self.clusters.len()
            || self
                .clusters
                .iter()
                .zip(&self.representatives)
                .any(|(c, r)| c.first() != Some(r))
        {
            return Err(Error::Invalid(format!(
                "{}: representatives must be each cluster's first member",
                self.question_id
            )));
        }
        Ok(())
    }
}

/// Greedy single pass: each generation, in sample order, joins the first
/// existing cluster whose representative it is bidirectionally equivalent
/// to, or starts a new cluster. Blank generations are always singletons and
/// never serve as a match target.
pub fn cluster_generations(gens: &[Generation], context: &str, entailer: &Entailer) -> Result<Clustering> {
    let first = gens
        .first()
        .ok_or_else(|| Error::Invalid("cannot cluster an empty generation list".into()))?;
    let question_id = first.question_id.clone();
    if let Some(other) = gens.iter().find(|g| g.question_id != question_id) {
        return Err(Error::Invalid(format!(
            "generations for `{}` and `{}` mixed in one clustering",
            question_id, other.question_id
        )));
    }
    let mut ordered: Vec<&Generation> = gens.iter().collect();
    ordered.sort_by_key(|g| g.sample_index);
    if ordered.iter().enumerate().any(|(i, g)| g.sample_index != i) {
        return Err(Error::Invalid(format!(
            "`{question_id}`: sample indices must be exactly 0..{}",
            gens.len()
        )));
    }

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut representatives: Vec<usize> = Vec::new();
    let mut verdict_log = Vec::new();

    for gen in &ordered {
        let text = gen.text.as_str();
        let mut joined = None;
        if !text.trim().is_empty() {
            for (ci, &rep) in representatives.iter().enumerate() {
                let rep_text = ordered[rep].text.as_str();
                if rep_text.trim().is_empty() {
                    continue;
                }
                let [forward, backward] = entailer.bidirectional_verdicts(rep_text, text, context)?;
                let equivalent = forward.directed == crate::entail::Directed::Entails
                    && backward.directed == crate::entail::Directed::Entails;
                verdict_log.push(forward);
                verdict_log.push(backward);
                if equivalent {
                    joined = Some(ci);
                    break;
                }
            }
        }
        match joined {
            Some(ci) => clusters[ci].push(gen.sample_index),
            None => {
                clusters.push(vec![gen.sample_index]);
                representatives.push(gen.sample_index);
            }
        }
    }

    Ok(Clustering {
        question_id,
        clusters,
        representatives,
        verdict_log,
    })
}

pub fn cluster_sizes(clustering: &Clustering) -> Vec<usize> {
    clustering.clusters.iter().map(Vec::len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entail::OracleJudge;
    use proptest::prelude::*;

    fn gens(texts: &[&str]) -> Vec<Generation> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Generation {
                question_id: "q".into(),
                sample_index: i,
                text: t.to_string(),
                token_logprobs: vec![-0.1],
                temperature: 1.0,
            })
            .collect()
    }

    fn normalized() -> Entailer {
        Entailer::oracle(OracleJudge::NormalizedExact)
    }

    #[test]
    fn all_equal_is_one_cluster() {
        let c = cluster_generations(&gens(&["A", "A", "A"]), "q", &normalized()).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1, 2]]);
        assert_eq!(cluster_sizes(&c), [3]);
    }

    #[test]
    fn greedy_trace() {
        let c = cluster_generations(&gens(&["A", "B", "a ", "C"]), "q", &normalized()).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 2], vec![1], vec![3]]);
        assert_eq!(c.representatives, [0, 1, 3]);
        assert_eq!(cluster_sizes(&c), [2, 1, 1]);
        assert_eq!(c.cluster_count(), cluster_sizes(&c).len());
        // B vs A; a vs A (match); C vs A, C vs B: four pairs, two verdicts each.
        assert_eq!(c.verdict_log.len(), 8);
        c.validate(4).unwrap();
    }

    #[test]
    fn preeclampsia_phrasings_share_a_cluster() {
        let a = "Preeclampsia is characterised by hypertension and proteinuria after 20 weeks of gestation";
        let b = "Hypertension and proteinuria occurring after 20 weeks indicate preeclampsia";
        let judge = OracleJudge::scripted([(a, b), (b, a)]);
        let c = cluster_generations(&gens(&[a, b, "Gestational diabetes"]), "q", &Entailer::oracle(judge)).unwrap();
        assert_eq!(c.cluster_count(), 2);
    }

    #[test]
    fn blank_generations_are_singletons_without_calls() {
        let e = Entailer::oracle(OracleJudge::Exact);
        let c = cluster_generations(&gens(&["", "A", " ", "A"]), "q", &e).unwrap();
        assert_eq!(c.clusters, vec![vec![0], vec![1, 3], vec![2]]);
        assert_eq!(e.judge_calls(), 0);
        assert!(c.verdict_log.iter().all(|v| !v.premise.trim().is_empty()));
    }

    #[test]
    fn non_transitive_judge_uses_first_match() {
        // b~a and c~b but not c~a: c compares with rep a (no), then has no other rep.
        let judge = OracleJudge::scripted([("a", "b"), ("b", "a"), ("b", "c"), ("c", "b")]);
        let c = cluster_generations(&gens(&["a", "b", "c"]), "q", &Entailer::oracle(judge)).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn input_validation() {
        let e = normalized();
        assert!(cluster_generations(&[], "q", &e).is_err());
        let mut g = gens(&["a", "b"]);
        g[1].question_id = "other".into();
        assert!(cluster_generations(&g, "q", &e).is_err());
        let mut g = gens(&["a", "b"]);
        g[1].sample_index = 5;
        assert!(cluster_generations(&g, "q", &e).is_err());
    }

    #[test]
    fn unordered_input_is_clustered_in_sample_order() {
        let mut g = gens(&["A", "B", "A"]);
        g.reverse();
        let c = cluster_generations(&g, "q", &normalized()).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 2], vec![1]]);
    }

    proptest! {
        #[test]
        fn recovers_planted_partition(labels in proptest::collection::vec(0usize..5, 1..=10)) {
            let texts: Vec<String> = labels.iter().enumerate().map(|(i, l)| format!("class{l}-v{i}")).collect();
            let judge = OracleJudge::from_classes(texts.iter().map(String::as_str).zip(labels.iter().copied()));
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let c = cluster_generations(&gens(&refs), "q", &Entailer::oracle(judge)).unwrap();
            c.validate(labels.len()).unwrap();

            let mut expected: Vec<Vec<usize>> = Vec::new();
            let mut order: Vec<usize> = Vec::new();
            for (i, l) in labels.iter().enumerate() {
                match order.iter().position(|o| o == l) {
                    Some(k) => expected[k].push(i),
                    None => { order.push(*l); expected.push(vec![i]); }
                }
            }
            prop_assert_eq!(c.clusters, expected);
        }

        #[test]
        fn deterministic(labels in proptest::collection::vec(0usize..4, 1..=10)) {
            let texts: Vec<String> = labels.iter().map(|l| format!("t{l}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let a = cluster_generations(&gens(&refs), "q", &normalized()).unwrap();
            let b = cluster_generations(&gens(&refs), "q", &normalized()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
