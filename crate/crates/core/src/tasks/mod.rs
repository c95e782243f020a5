//! The four evaluation tasks over the environment: target selection,
//! KC-to-KC transitions, trajectory scoring, normalization and the two
//! non-RL baselines.
//!
//! Window indices follow the warmup length: the "before" window is the
//! last ten warmup exercises and the "after" window the ten that follow,
//! so a reduced warmup slides both windows proportionally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, StudentTrace};
use crate::embed::EmbeddingSpace;
use crate::env::{
    weakest_index, weakest_kc, Action, BatchedEnv, EnvConfig, EnvState, Policy, StepOutcome,
    TargetRule,
};
use crate::error::{Error, Result};
use crate::kt::{warmup_state, KTModel, StudentState};
use crate::numcore::stream;
use crate::{Real, Tensor};


pub use crate::env::weakest_kc as select_target_weakest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Task 1: improve every KC.
    Global,
    /// Task 2: improve the most practiced recent KC.
    Practiced,
    /// Task 3: improve a KC sampled from the transition matrix.
    Upcoming,
    /// Task 4: improve whichever KC is currently weakest, re-selected
    /// before every step.
    Weakest,
}

/// A task bound to a student batch: the kind plus one static target set
/// per student. Weakest carries no precomputed sets.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub targets: Vec<Vec<u32>>,
}

impl TaskSpec {
    pub fn global(num_students: usize, num_kcs: usize) -> TaskSpec {
        let all: Vec<u32> = (0..num_kcs as u32).collect();
        TaskSpec {
            kind: TaskKind::Global,
            targets: vec![all; num_students],
        }
    }

    pub fn practiced(corpus: &Corpus, traces: &[StudentTrace], warmup: usize) -> Result<TaskSpec> {
        let targets = traces
            .iter()
            .map(|tr| select_target_practiced(corpus, tr, warmup).map(|kc| vec![kc]))
            .collect::<Result<_>>()?;
        Ok(TaskSpec {
            kind: TaskKind::Practiced,
            targets,
        })
    }

    pub fn upcoming(
        corpus: &Corpus,
        traces: &[StudentTrace],
        warmup: usize,
        matrix: &TransitionMatrix,
        seed: u64,
    ) -> Result<TaskSpec> {
        let targets = traces
            .iter()
            .map(|tr| sample_target_upcoming(matrix, corpus, tr, warmup, seed).map(|kc| vec![kc]))
            .collect::<Result<_>>()?;
        Ok(TaskSpec {
            kind: TaskKind::Upcoming,
            targets,
        })
    }

    pub fn weakest() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Weakest,
            targets: Vec::new(),
        }
    }

    pub fn rule(&self) -> TargetRule {
        match self.kind {
            TaskKind::Weakest => TargetRule::WeakestPerStep,
            _ => TargetRule::Static,
        }
    }

    /// Targets for student `i`; empty for the dynamic task.
    pub fn targets_of(&self, i: usize) -> &[u32] {
        match self.kind {
            TaskKind::Weakest => &[],
            _ => &self.targets[i],
        }
    }
}

/// `[start, end)` of the last `min(10, warmup)` warmup exercises.
fn before_window(warmup: usize) -> (usize, usize) {
    (warmup - warmup.min(10), warmup)
}

fn kcs_of_step(corpus: &Corpus, qid: u32) -> Result<&[u32]> {
    corpus
        .questions
        .get(qid as usize)
        .map(|q| q.kcs.as_slice())
        .ok_or_else(|| Error::data(format!("trace references unknown question {qid}")))
}

/// Most frequent KC among the last ten warmup exercises; ties go to the
/// lowest KC id. Multi-KC questions contribute one count per listed KC.
pub fn select_target_practiced(
    corpus: &Corpus,
    trace: &StudentTrace,
    warmup: usize,
) -> Result<u32> {
    if warmup == 0 {
        return Err(Error::config("practiced target needs warmup >= 1"));
    }
    if trace.len() < warmup {
        return Err(Error::data(format!(
            "student {} trace shorter than warmup {warmup}",
            trace.student_id
        )));
    }
    let (start, end) = before_window(warmup);
    let mut counts = vec![0u32; corpus.num_kcs()];
    for &(qid, _) in &trace.steps[start..end] {
        for &kc in kcs_of_step(corpus, qid)? {
            counts[kc as usize] += 1;
        }
    }
    let mut best: Option<(u32, u32)> = None;
    for (kc, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |(bc, _)| c > bc) {
            best = Some((c, kc as u32));
        }
    }
    best.map(|(_, kc)| kc)
        .ok_or_else(|| Error::data("practiced window saw no KCs".to_string()))
}

/// KC-to-KC transition counts with row-normalized probabilities. Rows
/// without data stay all-zero.
#[derive(Clone, Debug)]
pub struct TransitionMatrix {
    counts: Vec<u64>,
    probs: Tensor,
    num_kcs: usize,
}

impl TransitionMatrix {
    pub fn num_kcs(&self) -> usize {
        self.num_kcs
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.num_kcs + to]
    }

    pub fn prob(&self, from: usize, to: usize) -> Real {
        self.probs.row_slice(from)[to]
    }

    pub fn row_probs(&self, from: usize) -> &[Real] {
        self.probs.row_slice(from)
    }

    pub fn row_total(&self, from: usize) -> u64 {
        let k = self.num_kcs;
        self.counts[from * k..(from + 1) * k].iter().sum()
    }
}

/// Per student, every (KC before, KC after) pair across the two windows
/// increments one cell; the KC sets are deduplicated first, so a student
/// contributes each pair at most once.
pub fn build_transition_matrix(
    corpus: &Corpus,
    traces: &[StudentTrace],
    warmup: usize,
) -> Result<TransitionMatrix> {
    if warmup == 0 {
        return Err(Error::config("transition matrix needs warmup >= 1"));
    }
    let k = corpus.num_kcs();
    let mut counts = vec![0u64; k * k];
    for tr in traces {
        if tr.len() < warmup + 10 {
            return Err(Error::data(format!(
                "student {} trace shorter than warmup {warmup} plus the 10-step window",
                tr.student_id
            )));
        }
        let before = window_kc_set(corpus, tr, before_window(warmup))?;
        let after = window_kc_set(corpus, tr, (warmup, warmup + 10))?;
        for &c in &before {
            for &c2 in &after {
                counts[c as usize * k + c2 as usize] += 1;
            }
        }
    }
    let mut probs = Tensor::zeros(k, k);
    for c in 0..k {
        let total: u64 = counts[c * k..(c + 1) * k].iter().sum();
        if total > 0 {
            let row = probs.row_slice_mut(c);
            for c2 in 0..k {
                row[c2] = counts[c * k + c2] as Real / total as Real;
            }
        }
    }
    Ok(TransitionMatrix {
        counts,
        probs,
        num_kcs: k,
    })
}

fn window_kc_set(
    corpus: &Corpus,
    trace: &StudentTrace,
    (start, end): (usize, usize),
) -> Result<Vec<u32>> {
    let mut set = Vec::new();
    for &(qid, _) in &trace.steps[start..end] {
        for &kc in kcs_of_step(corpus, qid)? {
            if !set.contains(&kc) {
                set.push(kc);
            }
        }
    }
    set.sort_unstable();
    Ok(set)
}

/// Draws the target from the uniform mixture of the transition rows of the
/// student's recent KCs. Rows without data are dropped from the mixture;
/// if none remain the draw falls back to uniform over all KCs.
pub fn sample_target_upcoming(
    matrix: &TransitionMatrix,
    corpus: &Corpus,
    trace: &StudentTrace,
    warmup: usize,
    seed: u64,
) -> Result<u32> {
    if corpus.num_kcs() != matrix.num_kcs() {
        return Err(Error::data(format!(
            "matrix over {} KCs used with a {}-KC corpus",
            matrix.num_kcs(),
            corpus.num_kcs()
        )));
    }
    if warmup == 0 {
        return Err(Error::config("upcoming target needs warmup >= 1"));
    }
    if trace.len() < warmup {
        return Err(Error::data(format!(
            "student {} trace shorter than warmup {warmup}",
            trace.student_id
        )));
    }
    let k = matrix.num_kcs();
    let before = window_kc_set(corpus, trace, before_window(warmup))?;
    let informed: Vec<u32> = before
        .iter()
        .copied()
        .filter(|&c| matrix.row_total(c as usize) > 0)
        .collect();
    let mut marginal = vec![0.0; k];
    if informed.is_empty() {
        marginal.fill(1.0 / k as Real);
    } else {
        for &c in &informed {
            let row = matrix.row_probs(c as usize);
            for c2 in 0..k {
                marginal[c2] += row[c2] / informed.len() as Real;
            }
        }
    }
    let mut rng = stream(seed, "task-upcoming", trace.student_id as u64);
    let total: Real = marginal.iter().sum();
    let u: Real = rng.gen::<Real>() * total;
    let mut acc = 0.0;
    for (c2, &p) in marginal.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(c2 as u32);
        }
    }
    // Numerically possible when u lands on the accumulated rounding tail.
    Ok((k - 1) as u32)
}

/// Wires a task onto the environment: the spec decides the target rule and
/// supplies the static per-student sets.
pub fn reset_for_task<'a>(
    model: &'a KTModel,
    space: &'a EmbeddingSpace,
    cfg: EnvConfig,
    spec: &TaskSpec,
    traces: &[StudentTrace],
) -> Result<BatchedEnv<'a>> {
    BatchedEnv::reset(model, space, cfg, spec.rule(), traces, &spec.targets)
}

fn mean_knowledge(
    model: &KTModel,
    space: &EmbeddingSpace,
    state: &StudentState,
    targets: &[u32],
) -> Result<Real> {
    let mut sum = 0.0;
    for &c in targets {
        sum += model.predict_knowledge(state, space.kc(c as usize))?;
    }
    Ok(sum / targets.len() as Real)
}

/// `(1/|T|) Σ_c (ŷ^c_final − ŷ^c_initial)`, evaluated as the difference of
/// target-set means.
pub fn score_states(
    model: &KTModel,
    space: &EmbeddingSpace,
    initial: &StudentState,
    fin: &StudentState,
    targets: &[u32],
) -> Result<Real> {
    if targets.is_empty() {
        return Err(Error::data("scoring needs a non-empty target set".to_string()));
    }
    Ok(mean_knowledge(model, space, fin, targets)? - mean_knowledge(model, space, initial, targets)?)
}

/// Scores one completed trajectory. Static tasks score their fixed target
/// set; the weakest task scores the union of the per-step selections, each
/// KC still measured final-minus-initial.
pub fn score_trajectory(
    model: &KTModel,
    space: &EmbeddingSpace,
    initial: &StudentState,
    path: &[StepOutcome],
    kind: TaskKind,
    static_targets: &[u32],
) -> Result<Real> {
    let last = path
        .last()
        .ok_or_else(|| Error::protocol("cannot score an empty trajectory".to_string()))?;
    if !last.done {
        return Err(Error::protocol(format!(
            "trajectory stopped after {} steps without reaching the horizon",
            path.len()
        )));
    }
    let union;
    let targets: &[u32] = match kind {
        TaskKind::Weakest => {
            let mut sel: Vec<u32> = path.iter().flat_map(|o| o.targets.iter().copied()).collect();
            sel.sort_unstable();
            sel.dedup();
            union = sel;
            &union
        }
        _ => static_targets,
    };
    score_states(model, space, initial, &last.state_after, targets)
}

/// Runs `policy` over a freshly reset task environment and scores every
/// student. This is the evaluation path agents and baselines share.
pub fn evaluate_policy<P: Policy + ?Sized>(
    model: &KTModel,
    space: &EmbeddingSpace,
    cfg: &EnvConfig,
    spec: &TaskSpec,
    traces: &[StudentTrace],
    policy: &mut P,
    use_retrieval: bool,
) -> Result<Vec<Real>> {
    let mut env = reset_for_task(model, space, cfg.clone(), spec, traces)?;
    let initials: Vec<StudentState> = env.states.iter().map(|s| s.state.clone()).collect();
    let paths = env.rollout(policy, use_retrieval)?;
    paths
        .iter()
        .zip(initials.iter())
        .enumerate()
        .map(|(i, (p, init))| {
            score_trajectory(model, space, init, p, spec.kind, spec.targets_of(i))
        })
        .collect()
}

/// `raw / (1 − baseline_mean_knowledge) × 100`: improvement as a share of
/// the population's attainable headroom.
pub fn normalize_score(raw: Real, baseline_mean_knowledge: Real) -> Result<Real> {
    if !(baseline_mean_knowledge > 0.0 && baseline_mean_knowledge < 1.0) {
        return Err(Error::data(format!(
            "baseline mean knowledge {baseline_mean_knowledge} outside (0, 1)"
        )));
    }
    Ok(raw / (1.0 - baseline_mean_knowledge) * 100.0)
}

struct UniformQuestionPolicy {
    num_questions: u32,
    rng: ChaCha8Rng,
}

impl Policy for UniformQuestionPolicy {
    fn act(&mut self, envs: &[EnvState]) -> Vec<Action> {
        envs.iter()
            .map(|_| Action::Discrete(self.rng.gen_range(0..self.num_questions)))
            .collect()
    }
}

/// The random baseline: a uniformly drawn real question every step.
pub fn baseline_random(
    model: &KTModel,
    space: &EmbeddingSpace,
    cfg: &EnvConfig,
    spec: &TaskSpec,
    traces: &[StudentTrace],
    seed: u64,
) -> Result<Vec<Real>> {
    if space.num_questions() == 0 {
        return Err(Error::data("random baseline needs a non-empty corpus".to_string()));
    }
    let mut policy = UniformQuestionPolicy {
        num_questions: space.num_questions() as u32,
        rng: stream(seed, "task-random-policy", 0),
    };
    evaluate_policy(model, space, cfg, spec, traces, &mut policy, true)
}

/// The historical baseline: replays each student's real next `horizon`
/// exercises and responses through the model. No Bernoulli sampling is
/// involved anywhere.
pub fn baseline_historical(
    model: &KTModel,
    space: &EmbeddingSpace,
    cfg: &EnvConfig,
    spec: &TaskSpec,
    traces: &[StudentTrace],
) -> Result<Vec<Real>> {
    cfg.validate()?;
    let mut scores = Vec::with_capacity(traces.len());
    for (i, tr) in traces.iter().enumerate() {
        if tr.len() < cfg.warmup + cfg.horizon {
            return Err(Error::data(format!(
                "student {} trace has {} steps, needs warmup {} plus horizon {}",
                tr.student_id,
                tr.len(),
                cfg.warmup,
                cfg.horizon
            )));
        }
        let initial = warmup_state(model, &tr.steps, space, cfg.warmup)?;
        let mut state = initial.clone();
        let mut selected: Vec<u32> = Vec::new();
        for t in 0..cfg.horizon {
            if spec.kind == TaskKind::Weakest {
                selected.push(weakest_kc(model, &state, space)?);
            }
            let (qid, y) = tr.steps[cfg.warmup + t];
            state = model.advance_state(&state, &space.fused(qid as usize), y)?;
        }
        let targets: Vec<u32> = match spec.kind {
            TaskKind::Weakest => {
                selected.sort_unstable();
                selected.dedup();
                selected
            }
            _ => spec.targets_of(i).to_vec(),
        };
        scores.push(score_states(model, space, &initial, &state, &targets)?);
    }
    Ok(scores)
}
