//! Ground-truth student simulator.
//!
//! Mastery is a hidden per-KC scalar. A response to question q is Bernoulli
//! with P(correct) = sigmoid(mean mastery over q's KCs - difficulty), and a
//! correct-independent mastery gain is applied to each involved KC after the
//! response, so mastery never decreases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{dense, stream};

use super::{Corpus, Question, StudentTrace};

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Mastery gain rate per involved KC (0 freezes mastery).
    pub learning_rate: f64,
    /// Probability the next question is drawn from questions sharing a KC
    /// with the previous one instead of uniformly.
    pub recency_bias: f64,
    pub mastery_init_low: f64,
    pub mastery_init_high: f64,
    /// Per-student general ability, added to every KC's initial mastery.
    /// This shared factor is what lets a sequence model infer something
    /// about a new student from their overall correctness.
    pub ability_low: f64,
    pub ability_high: f64,
    /// Per-KC offset shared by the whole cohort (drawn once from the cohort
    /// seed), making some KCs systematically easier than others.
    pub kc_base_low: f64,
    pub kc_base_high: f64,
    /// Record the hidden mastery vector after every step.
    pub snapshot_mastery: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            learning_rate: 0.3,
            recency_bias: 0.3,
            mastery_init_low: -1.0,
            mastery_init_high: 1.5,
            ability_low: 0.0,
            ability_high: 0.0,
            kc_base_low: 0.0,
            kc_base_high: 0.0,
            snapshot_mastery: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return Err(Error::config("learning_rate must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.recency_bias) {
            return Err(Error::config("recency_bias must be in [0, 1]"));
        }
        if self.mastery_init_low > self.mastery_init_high {
            return Err(Error::config("mastery init bounds inverted"));
        }
        if self.ability_low > self.ability_high {
            return Err(Error::config("ability bounds inverted"));
        }
        if self.kc_base_low > self.kc_base_high {
            return Err(Error::config("kc_base bounds inverted"));
        }
        Ok(())
    }
}

/// P(correct) for a mastery vector answering `q`.
pub fn response_probability(mastery: &[f64], q: &Question) -> f64 {
    let mean: f64 =
        q.kcs.iter().map(|&c| mastery[c as usize]).sum::<f64>() / q.kcs.len() as f64;
    dense::sigmoid(mean - q.difficulty)
}

fn apply_gain(mastery: &mut [f64], q: &Question, p: f64, lr: f64) {
    let gain = lr * (1.0 - p) * 0.5;
    for &c in &q.kcs {
        mastery[c as usize] += gain;
    }
}

fn pick_question(
    rng: &mut ChaCha8Rng,
    corpus: &Corpus,
    related: &[Vec<u32>],
    prev: Option<u32>,
    recency_bias: f64,
) -> u32 {
    if let Some(p) = prev {
        if recency_bias > 0.0 && rng.gen::<f64>() < recency_bias {
            let pool = &related[p as usize];
            return pool[rng.gen_range(0..pool.len())];
        }
    }
    rng.gen_range(0..corpus.num_questions() as u32)
}

/// Question ids sharing at least one KC, per question. A question always
/// relates to itself, so the pools are never empty.
fn related_pools(corpus: &Corpus) -> Vec<Vec<u32>> {
    let mut by_kc: Vec<Vec<u32>> = vec![Vec::new(); corpus.num_kcs()];
    for q in &corpus.questions {
        for &c in &q.kcs {
            by_kc[c as usize].push(q.id);
        }
    }
    corpus
        .questions
        .iter()
        .map(|q| {
            let mut pool: Vec<u32> = q
                .kcs
                .iter()
                .flat_map(|&c| by_kc[c as usize].iter().copied())
                .collect();
            pool.sort_unstable();
            pool.dedup();
            pool
        })
        .collect()
}

fn run_student(
    rng: &mut ChaCha8Rng,
    corpus: &Corpus,
    related: &[Vec<u32>],
    cfg: &SimConfig,
    kc_base: &[f64],
    student_id: u32,
    length: usize,
) -> StudentTrace {
    let ability = rng.gen_range(cfg.ability_low..=cfg.ability_high);
    let mut mastery: Vec<f64> = (0..corpus.num_kcs())
        .map(|c| ability + kc_base[c] + rng.gen_range(cfg.mastery_init_low..=cfg.mastery_init_high))
        .collect();
    let mut steps = Vec::with_capacity(length);
    let mut snapshots = cfg.snapshot_mastery.then(|| Vec::with_capacity(length));
    let mut prev = None;
    for _ in 0..length {
        let qid = pick_question(rng, corpus, related, prev, cfg.recency_bias);
        let q = &corpus.questions[qid as usize];
        let p = response_probability(&mastery, q);
        let y = u8::from(rng.gen::<f64>() < p);
        apply_gain(&mut mastery, q, p, cfg.learning_rate);
        steps.push((qid, y));
        if let Some(s) = snapshots.as_mut() {
            s.push(mastery.clone());
        }
        prev = Some(qid);
    }
    StudentTrace {
        student_id,
        steps,
        mastery: snapshots,
    }
}

/// The cohort-level per-KC offsets, drawn once from the cohort seed so that
/// singles and cohorts agree.
fn draw_kc_base(corpus: &Corpus, cfg: &SimConfig, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "sim-kc-base", 0);
    (0..corpus.num_kcs())
        .map(|_| rng.gen_range(cfg.kc_base_low..=cfg.kc_base_high))
        .collect()
}

/// Simulate one student on a dedicated RNG stream keyed by `student_id`.
pub fn simulate_student(
    corpus: &Corpus,
    cfg: &SimConfig,
    length: usize,
    seed: u64,
    student_id: u32,
) -> Result<StudentTrace> {
    cfg.validate()?;
    if length == 0 {
        return Err(Error::config("trace length must be >= 1"));
    }
    let related = related_pools(corpus);
    let kc_base = draw_kc_base(corpus, cfg, seed);
    let mut rng = stream(seed, "student-sim", student_id as u64);
    Ok(run_student(&mut rng, corpus, &related, cfg, &kc_base, student_id, length))
}

/// Simulate `num_students` independent traces; trace i uses the same RNG
/// stream as `simulate_student(.., i)`, so cohorts compose from singles.
pub fn simulate_cohort(
    corpus: &Corpus,
    cfg: &SimConfig,
    num_students: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<StudentTrace>> {
    cfg.validate()?;
    if length == 0 || num_students == 0 {
        return Err(Error::config("cohort needs students and a positive length"));
    }
    let related = related_pools(corpus);
    let kc_base = draw_kc_base(corpus, cfg, seed);
    Ok((0..num_students as u32)
        .map(|id| {
            let mut rng = stream(seed, "student-sim", id as u64);
            run_student(&mut rng, corpus, &related, cfg, &kc_base, id, length)
        })
        .collect())
}
