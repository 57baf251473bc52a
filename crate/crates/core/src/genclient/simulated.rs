//! Seeded stand-in for a live model.
//!
//! Each question gets a latent answer distribution: the reference answer
//! plus distractors drawn from pools of clinical answers of similar length.
//! For questions the simulated model "knows", the reference dominates; for
//! the others a distractor is modal and the distribution is flatter, so
//! wrong answers come with more semantic dispersion. Sampling applies the
//! request temperature to the logits, so low temperatures collapse the
//! distribution toward its mode. Token log-probabilities carry only a weak
//! trace of the answer's probability on top of per-question noise.
//!
//! Every draw is a pure function of (seed, question id, sample index,
//! temperature), so results do not depend on request order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{Completion, CompletionRequest, GenerationBackend, Purpose};
use crate::dataset::{Category, Part, Question};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const SHORT_ANSWERS: &[&str] = &[
    "Progesterone",
    "Oxytocin",
    "Oestradiol",
    "Misoprostol",
    "Methotrexate",
    "Labetalol",
    "Nifedipine",
    "Ergometrine",
    "Prolactin",
    "Inhibin B",
    "Letrozole",
    "Clomifene",
    "Syphilis",
    "Listeria",
    "Rubella",
    "Anti-D",
    "Folic acid",
    "Aspirin",
    "Carboprost",
    "Atosiban",
    "Danazol",
    "Mifepristone",
    "Cabergoline",
    "Oxybutynin",
];

pub const MEDIUM_ANSWERS: &[&str] = &[
    "Tranexamic acid",
    "Low molecular weight heparin",
    "Intravenous magnesium sulphate",
    "Ultrasound of the renal tract",
    "Human chorionic gonadotrophin",
    "Antiphospholipid syndrome",
    "Polycystic ovary syndrome",
    "Emergency caesarean section",
    "Expectant management",
    "Laparoscopic salpingectomy",
    "External cephalic version",
    "Fetal blood sampling",
    "Sheehan syndrome",
    "Obstetric cholestasis",
];

pub const LONG_ANSWERS: &[&str] = &[
    "Immediate delivery by category one caesarean section under general anaesthesia",
    "Admit for intravenous antibiotics, fluid resuscitation and urgent senior review",
    "Offer induction of labour at 39 weeks with continuous electronic fetal monitoring",
    "Refer urgently to the gynaecological oncology multidisciplinary team meeting",
    "Commence intravenous magnesium sulphate and antihypertensive therapy with labetalol",
    "Perform a transvaginal ultrasound scan and serial serum hCG measurements 48 hours apart",
    "Arrange an urgent MRI of the pelvis to stage the disease before definitive surgery",
    "Give corticosteroids for fetal lung maturation and plan delivery within one week",
    "Start a levonorgestrel intrauterine system and review symptoms again in six months",
    "Offer hysteroscopy with endometrial biopsy under local anaesthesia in outpatient clinic",
];

/// Knobs of the latent answer model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationParams {
    /// Probability that the model's modal answer is the reference.
    pub p_known: f64,
    pub distractors: usize,
    /// Mean logit of the reference answer on known questions.
    pub known_margin: f64,
    /// Logit boost of the modal distractor on unknown questions.
    pub unknown_margin: f64,
    pub logit_noise: f64,
    /// Range of the per-question token NLL offset.
    pub nll_offset: (f64, f64),
    /// Weight of `1 - p(answer)` in the per-token NLL.
    pub nll_signal: f64,
    /// Mean of the exponential per-token NLL noise.
    pub nll_noise: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            p_known: 0.5,
            distractors: 5,
            known_margin: 2.6,
            unknown_margin: 0.9,
            logit_noise: 0.6,
            nll_offset: (0.05, 0.9),
            nll_signal: 0.35,
            nll_noise: 0.12,
        }
    }
}

#[derive(Debug, Clone)]
struct Profile {
    candidates: Vec<String>,
    logits: Vec<f64>,
    nll_offset: f64,
    category: Category,
    part: Part,
}

pub struct SimulatedBackend {
    id: String,
    seed: u64,
    profiles: HashMap<String, Profile>,
    params: SimulationParams,
    calls: AtomicUsize,
}

impl SimulatedBackend {
    pub fn new(questions: &[Question], seed: u64) -> Self {
        Self::with_params(questions, seed, &SimulationParams::default())
    }

    pub fn with_params(questions: &[Question], seed: u64, params: &SimulationParams) -> Self {
        let profiles = questions
            .iter()
            .filter(|q| q.is_eligible())
            .map(|q| (q.id.clone(), build_profile(q, seed, params)))
            .collect();
        Self {
            id: format!(
                "simulated:{seed}:{}",
                &crate::util::sha256_hex(serde_json::to_vec(params).expect("params serialize"))[..12]
            ),
            seed,
            profiles,
            params: params.clone(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn profile(&self, question_id: &str) -> Result<&Profile> {
        self.profiles
            .get(question_id)
            .ok_or_else(|| Error::Backend(format!("simulated backend knows no question `{question_id}`")))
    }

    fn answer(&self, question_id: &str, request: &CompletionRequest) -> Result<Completion> {
        let profile = self.profile(question_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &[
                "sample",
                question_id,
                &request.sample_index.to_string(),
                &request.temperature.to_bits().to_string(),
            ],
        ));
        let probs = tempered_softmax(&profile.logits, request.temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let canonical = &profile.candidates[pick];
        let text = match rng.random_range(0..4) {
            0 => canonical.to_lowercase(),
            1 => format!(" {canonical}"),
            _ => canonical.clone(),
        };
        let n_tokens = canonical.split_whitespace().count().max(1);
        let base = profile.nll_offset + self.params.nll_signal * (1.0 - probs[pick]);
        let token_logprobs = request.logprobs.then(|| {
            (0..n_tokens)
                .map(|_| {
                    let noise = -self.params.nll_noise * (1.0 - rng.random::<f64>()).ln();
                    -(base + noise)
                })
                .collect()
        });
        Ok(Completion { text, token_logprobs })
    }
}

impl GenerationBackend for SimulatedBackend {
    /// Includes the seed, so differently seeded runs never share cache entries.
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &request.purpose {
            Purpose::Answer { question_id } => self.answer(question_id, request),
            Purpose::Classify { question_id } => {
                let profile = self.profile(question_id)?;
                let label = match profile.category {
                    Category::Knowledge => "knowledge",
                    Category::Reasoning => "reasoning",
                    Category::Unlabelled => {
                        let h = derive_seed(self.seed, &["classify", question_id]);
                        let knowledge_share = match profile.part {
                            Part::PartOne => 0.8,
                            Part::PartTwo => 0.45,
                        };
                        if ((h >> 11) as f64 / (1u64 << 53) as f64) < knowledge_share {
                            "knowledge"
                        } else {
                            "reasoning"
                        }
                    }
                };
                Ok(Completion {
                    text: label.into(),
                    token_logprobs: None,
                })
            }
            Purpose::Entail => Err(Error::Backend(
                "the simulated backend does not judge entailment; use an oracle judge".into(),
            )),
        }
    }
}

fn build_profile(q: &Question, seed: u64, params: &SimulationParams) -> Profile {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["profile", &q.id]));
    let reference = q.reference_answer.trim().to_string();
    let pool = pool_for(&reference);
    let norm_ref = reference.to_lowercase();
    let mut available: Vec<&str> = pool.iter().copied().filter(|c| c.to_lowercase() != norm_ref).collect();
    let mut candidates = vec![reference];
    for _ in 0..params.distractors.min(available.len()) {
        let i = rng.random_range(0..available.len());
        candidates.push(available.swap_remove(i).to_string());
    }

    let known = rng.random::<f64>() < params.p_known;
    let mut logits: Vec<f64> = (0..candidates.len())
        .map(|_| params.logit_noise * std_normal(&mut rng))
        .collect();
    if known {
        logits[0] += params.known_margin;
    } else if candidates.len() > 1 {
        let modal = rng.random_range(1..candidates.len());
        logits[modal] += params.unknown_margin;
        logits[0] -= 0.5;
    }
    let (lo, hi) = params.nll_offset;
    Profile {
        candidates,
        logits,
        nll_offset: lo + (hi - lo) * rng.random::<f64>(),
        category: q.category,
        part: q.part,
    }
}

fn pool_for(reference: &str) -> &'static [&'static str] {
    match reference.chars().count() {
        0..=14 => SHORT_ANSWERS,
        15..=60 => MEDIUM_ANSWERS,
        _ => LONG_ANSWERS,
    }
}

fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if temperature <= 0.0 {
        let argmax = logits.iter().position(|&l| l == max).unwrap_or(0);
        return (0..logits.len()).map(|i| f64::from(u8::from(i == argmax))).collect();
    }
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A seeded corpus of `n` synthetic eligible questions whose reference
/// answers come from the built-in answer pools.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["corpus"]));
    (0..n)
        .map(|i| {
            let pool = match rng.random_range(0..10) {
                0..=5 => SHORT_ANSWERS,
                6..=7 => MEDIUM_ANSWERS,
                _ => LONG_ANSWERS,
            };
            let part = if rng.random::<bool>() {
                Part::PartOne
            } else {
                Part::PartTwo
            };
            let category = if rng.random::<f64>() < 0.65 {
                Category::Knowledge
            } else {
                Category::Reasoning
            };
            Question {
                id: format!("syn-{i:04}"),
                part,
                domain: format!("Synthetic domain {}", rng.random_range(1..=14)),
                category,
                text: format!("Synthetic short-answer question number {i}?"),
                reference_answer: pool[rng.random_range(0..pool.len())].to_string(),
                excluded: None,
            }
        })
        .collect()
}
