//! Synthetic question corpus with a hidden ground-truth student model.
//!
//! Each knowledge concept (KC) owns a disjoint token template; questions are
//! composed from their KCs' templates plus shared noise tokens, and every
//! solution step draws only from the KCs mapped to it. Difficulty is a hidden
//! per-question scalar that never appears in the text. Students are simulated
//! with a logistic response model and monotone mastery growth, which gives
//! the rest of the pipeline a learnable signal with known structure.

mod gen;
mod io;
mod sim;


pub use gen::{extend_corpus, generate_corpus};
pub use io::{load_corpus, load_traces, save_corpus, save_traces};
pub use sim::{response_probability, simulate_cohort, simulate_student, SimConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved out-of-vocabulary token id.
pub const OOV_TOKEN: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeConcept {
    pub id: u32,
    pub name: String,
    pub template_tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub text: Vec<u32>,
    pub solution_steps: Vec<Vec<u32>>,
    /// Sorted, deduplicated KC ids.
    pub kcs: Vec<u32>,
    /// Sorted (step index, kc id) pairs; covers every step and every KC.
    pub step_kc_map: Vec<(u32, u32)>,
    /// Hidden difficulty in `[-2, 2]`.
    pub difficulty: f64,
}

impl Question {
    /// KC ids mapped to one solution step.
    pub fn step_kcs(&self, step: usize) -> impl Iterator<Item = u32> + '_ {
        self.step_kc_map
            .iter()
            .filter(move |(s, _)| *s as usize == step)
            .map(|(_, c)| *c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kcs: Vec<KnowledgeConcept>,
    pub questions: Vec<Question>,
    pub vocab_size: u32,
    pub seed: u64,
    /// Number of questions before any extension; extension variants have
    /// ids at or above this.
    pub num_original: u32,
}

impl Corpus {
    pub fn num_kcs(&self) -> usize {
        self.kcs.len()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    /// Question ids whose KC set contains `kc`.
    pub fn questions_with_kc(&self, kc: u32) -> Vec<u32> {
        self.questions
            .iter()
            .filter(|q| q.kcs.binary_search(&kc).is_ok())
            .map(|q| q.id)
            .collect()
    }

    /// Structural invariants; load and the generators both go through this.
    pub fn validate(&self) -> Result<()> {
        let k = self.kcs.len() as u32;
        for (i, kc) in self.kcs.iter().enumerate() {
            if kc.id != i as u32 {
                return Err(Error::data(format!("kc id {} out of order", kc.id)));
            }
            if kc.template_tokens.len() < 3 {
                return Err(Error::data(format!("kc {} template too small", kc.id)));
            }
            let mut uniq = kc.template_tokens.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() != kc.template_tokens.len() {
                return Err(Error::data(format!("kc {} template not distinct", kc.id)));
            }
            if kc.template_tokens.iter().any(|&t| t >= self.vocab_size) {
                return Err(Error::data(format!("kc {} token out of vocab", kc.id)));
            }
        }
        for (i, q) in self.questions.iter().enumerate() {
            if q.id != i as u32 {
                return Err(Error::data(format!("question id {} out of order", q.id)));
            }
            if q.kcs.is_empty() || q.kcs.len() > 4 {
                return Err(Error::data(format!(
                    "question {} has {} KCs, expected 1..=4",
                    q.id,
                    q.kcs.len()
                )));
            }
            if q.kcs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::data(format!("question {} KCs not sorted unique", q.id)));
            }
            if q.kcs.iter().any(|&c| c >= k) {
                return Err(Error::data(format!("question {} references unknown KC", q.id)));
            }
            if q.solution_steps.len() < 2 || q.solution_steps.len() > 6 {
                return Err(Error::data(format!(
                    "question {} has {} steps, expected 2..=6",
                    q.id,
                    q.solution_steps.len()
                )));
            }
            if !(-2.0..=2.0).contains(&q.difficulty) {
                return Err(Error::data(format!("question {} difficulty out of range", q.id)));
            }
            if q.text.iter().any(|&t| t >= self.vocab_size)
                || q.solution_steps
                    .iter()
                    .any(|s| s.iter().any(|&t| t >= self.vocab_size))
            {
                return Err(Error::data(format!("question {} token out of vocab", q.id)));
            }
            let ns = q.solution_steps.len() as u32;
            let mut step_covered = vec![false; ns as usize];
            let mut kc_covered = vec![false; q.kcs.len()];
            for &(s, c) in &q.step_kc_map {
                if s >= ns {
                    return Err(Error::data(format!("question {} maps missing step {s}", q.id)));
                }
                match q.kcs.binary_search(&c) {
                    Ok(pos) => kc_covered[pos] = true,
                    Err(_) => {
                        return Err(Error::data(format!(
                            "question {} maps step to foreign KC {c}",
                            q.id
                        )))
                    }
                }
                step_covered[s as usize] = true;
            }
            if !step_covered.iter().all(|&b| b) || !kc_covered.iter().all(|&b| b) {
                return Err(Error::data(format!(
                    "question {} step/KC bipartite coverage violated",
                    q.id
                )));
            }
        }
        if self.num_original as usize > self.questions.len() {
            return Err(Error::data("num_original exceeds question count".to_string()));
        }
        Ok(())
    }
}

/// One simulated student: the visible exercise/response sequence plus
/// optional hidden mastery snapshots (state after each step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTrace {
    pub student_id: u32,
    pub steps: Vec<(u32, u8)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mastery: Option<Vec<Vec<f64>>>,
}

impl StudentTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub num_kcs: usize,
    pub num_questions: usize,
    pub tokens_per_kc: usize,
    pub noise_pool: usize,
    /// Template tokens drawn into the question text per involved KC.
    pub kc_tokens_per_question: usize,
    /// Noise tokens drawn into the question text.
    pub noise_tokens_per_question: usize,
    /// Weights for drawing 1, 2, 3 or 4 KCs per question.
    pub kc_count_weights: [f64; 4],
    pub min_steps: usize,
    pub max_steps: usize,
    pub step_tokens_min: usize,
    pub step_tokens_max: usize,
    /// Std-dev of the centered difficulty draw (clamped to `[-2, 2]`).
    pub difficulty_std: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_kcs: 20,
            num_questions: 200,
            tokens_per_kc: 50,
            noise_pool: 500,
            kc_tokens_per_question: 5,
            noise_tokens_per_question: 6,
            kc_count_weights: [0.1, 0.2, 0.5, 0.2],
            min_steps: 2,
            max_steps: 6,
            step_tokens_min: 3,
            step_tokens_max: 6,
            difficulty_std: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_kcs == 0 || self.num_questions == 0 {
            return Err(Error::config("corpus must have KCs and questions"));
        }
        if self.tokens_per_kc < 3 {
            return Err(Error::config("tokens_per_kc must be >= 3"));
        }
        if self.min_steps < 2 || self.max_steps > 6 || self.min_steps > self.max_steps {
            return Err(Error::config("step count bounds must stay within 2..=6"));
        }
        if self.step_tokens_min == 0 || self.step_tokens_min > self.step_tokens_max {
            return Err(Error::config("invalid step token bounds"));
        }
        if self.kc_count_weights.iter().any(|&w| w < 0.0)
            || self.kc_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("kc_count_weights must be nonnegative, not all zero"));
        }
        if self.difficulty_std < 0.0 {
            return Err(Error::config("difficulty_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> u32 {
        1 + (self.num_kcs * self.tokens_per_kc + self.noise_pool) as u32
    }
}
