//! The trained KT model wrapped as a batched, fixed-horizon MDP.
//!
//! Stochasticity is confined to one Bernoulli draw per step, taken from a
//! per-student stream derived from (seed, student id), so batch order and
//! batch size never change an environment's trajectory.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::StudentTrace;
use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::kt::{warmup_state, KTModel, StudentState};
use crate::numcore::stream;
use crate::{Real, Tensor};


#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Continuous,
    Discrete,
}

/// How the per-student target KC set evolves over a rollout. Static tasks
/// fix it at reset; the weakest-KC task re-derives it before every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRule {
    Static,
    WeakestPerStep,
}

#[derive(Clone, Debug)]
pub struct EnvConfig {
    pub horizon: usize,
    pub warmup: usize,
    pub reward_scale: Real,
    pub gamma: Real,
    pub mode: ActionMode,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 10,
            warmup: 100,
            reward_scale: 1000.0,
            gamma: 0.99,
            mode: ActionMode::Continuous,
            seed: 7,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::config("reward_scale must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One raw policy output, before any retrieval mapping.
#[derive(Clone, Debug)]
pub enum Action {
    Continuous(Vec<Real>),
    Discrete(u32),
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub student_id: u32,
    pub state: StudentState,
    pub targets: Vec<u32>,
    /// predict_knowledge of the current state for each entry of `targets`;
    /// refreshed on every transition.
    pub knowledge: Vec<Real>,
    pub step: usize,
    pub done: bool,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub reward: Real,
    /// Sampled student response.
    pub response: u8,
    /// Model probability of a correct response to the chosen action.
    pub y_hat: Real,
    pub done: bool,
    /// Set when the action was a real question (discrete, or snapped).
    pub question_id: Option<u32>,
    pub targets: Vec<u32>,
    /// Mean knowledge over the step's targets, before and after.
    pub knowledge_before: Real,
    pub knowledge_after: Real,
    pub state_after: StudentState,
}

/// Hidden and cell stacked into the compact state vector agents consume.
pub fn compact_state(state: &StudentState) -> Vec<Real> {
    let mut v = Vec::with_capacity(state.hidden.len() + state.cell.len());
    v.extend_from_slice(state.hidden.data());
    v.extend_from_slice(state.cell.data());
    v
}

/// Nearest fused question by cosine similarity; ties go to the lowest id.
pub fn map_action(space: &EmbeddingSpace, raw: &[Real], mode: ActionMode) -> Result<(u32, Vec<Real>)> {
    if space.num_questions() == 0 {
        return Err(Error::data("cannot map actions on an empty corpus".to_string()));
    }
    match mode {
        ActionMode::Discrete => {
            if raw.len() != 1 {
                return Err(Error::Dim {
                    op: "map_action",
                    lhs: vec![1, raw.len()],
                    rhs: vec![1, 1],
                });
            }
            let qid = raw[0].round();
            if !(qid >= 0.0 && (qid as usize) < space.num_questions()) {
                return Err(Error::data(format!(
                    "discrete action {} outside question range 0..{}",
                    raw[0],
                    space.num_questions()
                )));
            }
            let qid = qid as usize;
            Ok((qid as u32, space.fused(qid)))
        }
        ActionMode::Continuous => {
            let fused = space.fused_all();
            let qid = nearest_row(&fused, raw)?;
            Ok((qid as u32, fused.row_slice(qid).to_vec()))
        }
    }
}

fn nearest_row(rows: &Tensor, raw: &[Real]) -> Result<usize> {
    if raw.len() != rows.cols() {
        return Err(Error::Dim {
            op: "map_action",
            lhs: vec![1, raw.len()],
            rhs: vec![1, rows.cols()],
        });
    }
    let raw_norm = raw.iter().map(|x| x * x).sum::<Real>().sqrt();
    if raw_norm == 0.0 || !raw_norm.is_finite() {
        return Err(Error::data("action vector has zero or non-finite norm".to_string()));
    }
    let mut best = 0usize;
    let mut best_cos = Real::NEG_INFINITY;
    for r in 0..rows.rows() {
        let row = rows.row_slice(r);
        let dot: Real = row.iter().zip(raw.iter()).map(|(a, b)| a * b).sum();
        let row_norm = row.iter().map(|x| x * x).sum::<Real>().sqrt();
        let cos = if row_norm == 0.0 { -1.0 } else { dot / (row_norm * raw_norm) };
        if cos > best_cos {
            best_cos = cos;
            best = r;
        }
    }
    Ok(best)
}

/// Batched policy interface used by [`BatchedEnv::rollout`]. Implementors
/// see every live environment at once so they can batch their own forward
/// passes.
pub trait Policy {
    fn act(&mut self, envs: &[EnvState]) -> Vec<Action>;
}

impl<F: FnMut(&[EnvState]) -> Vec<Action>> Policy for F {
    fn act(&mut self, envs: &[EnvState]) -> Vec<Action> {
        self(envs)
    }
}

#[derive(Debug)]
pub struct BatchedEnv<'a> {
    model: &'a KTModel,
    space: &'a EmbeddingSpace,
    /// Fused rows cached once; the per-step nearest-question scan and every
    /// discrete lookup read from here.
    fused: Tensor,
    cfg: EnvConfig,
    rule: TargetRule,
    pub states: Vec<EnvState>,
}

impl<'a> BatchedEnv<'a> {
    /// Warm-starts one environment per trace. `targets` supplies the static
    /// per-student target sets; under [`TargetRule::WeakestPerStep`] it is
    /// ignored and targets are derived from the warmed-up states.
    pub fn reset(
        model: &'a KTModel,
        space: &'a EmbeddingSpace,
        cfg: EnvConfig,
        rule: TargetRule,
        traces: &[StudentTrace],
        targets: &[Vec<u32>],
    ) -> Result<Self> {
        cfg.validate()?;
        if model.dim() != space.dim() {
            return Err(Error::Dim {
                op: "env_reset",
                lhs: vec![1, model.dim()],
                rhs: vec![1, space.dim()],
            });
        }
        if traces.is_empty() {
            return Err(Error::data("reset needs at least one trace".to_string()));
        }
        if rule == TargetRule::Static && targets.len() != traces.len() {
            return Err(Error::data(format!(
                "{} target sets for {} traces",
                targets.len(),
                traces.len()
            )));
        }
        let short: Vec<u32> = traces
            .iter()
            .filter(|t| t.len() < cfg.warmup)
            .map(|t| t.student_id)
            .collect();
        if !short.is_empty() {
            return Err(Error::data(format!(
                "traces shorter than warmup {}: students {short:?}",
                cfg.warmup
            )));
        }
        let k = space.num_kcs() as u32;
        let mut states = Vec::with_capacity(traces.len());
        for (i, tr) in traces.iter().enumerate() {
            let state = warmup_state(model, &tr.steps, space, cfg.warmup)?;
            let tg = match rule {
                TargetRule::Static => {
                    let tg = targets[i].clone();
                    if tg.is_empty() {
                        return Err(Error::data(format!(
                            "student {} has an empty target set",
                            tr.student_id
                        )));
                    }
                    if let Some(&bad) = tg.iter().find(|&&c| c >= k) {
                        return Err(Error::data(format!(
                            "student {} targets unknown KC {bad}",
                            tr.student_id
                        )));
                    }
                    tg
                }
                TargetRule::WeakestPerStep => vec![weakest_kc(model, &state, space)?],
            };
            let knowledge = knowledge_of(model, &state, space, &tg)?;
            states.push(EnvState {
                student_id: tr.student_id,
                state,
                targets: tg,
                knowledge,
                step: 0,
                done: false,
                rng: stream(cfg.seed, "student-env", tr.student_id as u64),
            });
        }
        Ok(BatchedEnv {
            model,
            space,
            fused: space.fused_all(),
            cfg,
            rule,
            states,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &KTModel {
        self.model
    }

    pub fn space(&self) -> &EmbeddingSpace {
        self.space
    }

    pub fn all_done(&self) -> bool {
        self.states.iter().all(|s| s.done)
    }

    /// Advances environment `idx` by one action. With `use_retrieval`,
    /// continuous actions are snapped to the nearest real question before
    /// the KT model sees them; without it the raw embedding is fed directly
    /// and no question id is reported.
    pub fn step_one(&mut self, idx: usize, action: &Action, use_retrieval: bool) -> Result<StepOutcome> {
        let d = self.model.dim();
        let st = self
            .states
            .get_mut(idx)
            .ok_or_else(|| Error::data(format!("no environment at index {idx}")))?;
        if st.done {
            return Err(Error::protocol(format!(
                "environment for student {} is done; reset before stepping",
                st.student_id
            )));
        }
        let (question_id, emb): (Option<u32>, Vec<Real>) = match action {
            Action::Continuous(raw) => {
                if raw.len() != d {
                    return Err(Error::Dim {
                        op: "env_step",
                        lhs: vec![1, raw.len()],
                        rhs: vec![1, d],
                    });
                }
                if use_retrieval {
                    let qid = nearest_row(&self.fused, raw)?;
                    (Some(qid as u32), self.fused.row_slice(qid).to_vec())
                } else {
                    (None, raw.clone())
                }
            }
            Action::Discrete(q) => {
                let q = *q as usize;
                if q >= self.fused.rows() {
                    return Err(Error::data(format!(
                        "discrete action {q} outside question range 0..{}",
                        self.fused.rows()
                    )));
                }
                (Some(q as u32), self.fused.row_slice(q).to_vec())
            }
        };
        if self.rule == TargetRule::WeakestPerStep {
            st.targets = vec![weakest_kc(self.model, &st.state, self.space)?];
            st.knowledge = knowledge_of(self.model, &st.state, self.space, &st.targets)?;
        }
        let knowledge_before = mean(&st.knowledge);
        let y_hat = self.model.predict_response(&st.state, &emb)?;
        if !(y_hat > 0.0 && y_hat < 1.0) {
            return Err(Error::training(format!(
                "response probability {y_hat} left (0, 1) for student {}",
                st.student_id
            )));
        }
        let draw: Real = st.rng.gen();
        let response = (draw < y_hat) as u8;
        let next = self.model.advance_state(&st.state, &emb, response)?;
        let knowledge = knowledge_of(self.model, &next, self.space, &st.targets)?;
        let knowledge_after = mean(&knowledge);
        let reward = self.cfg.reward_scale * (knowledge_after - knowledge_before);
        st.state = next;
        st.knowledge = knowledge;
        st.step += 1;
        st.done = st.step >= self.cfg.horizon;
        Ok(StepOutcome {
            reward,
            response,
            y_hat,
            done: st.done,
            question_id,
            targets: st.targets.clone(),
            knowledge_before,
            knowledge_after,
            state_after: st.state.clone(),
        })
    }

    /// Steps every live environment with its own action. Equivalent to
    /// calling [`step_one`] in index order, which the batched test pins.
    pub fn step_batch(&mut self, actions: &[Action], use_retrieval: bool) -> Result<Vec<StepOutcome>> {
        if actions.len() != self.states.len() {
            return Err(Error::data(format!(
                "{} actions for {} environments",
                actions.len(),
                self.states.len()
            )));
        }
        let mut out = Vec::with_capacity(actions.len());
        for (i, a) in actions.iter().enumerate() {
            out.push(self.step_one(i, a, use_retrieval)?);
        }
        Ok(out)
    }

    /// Runs the full horizon, returning one outcome row per student per
    /// step. Training rollouts pass `use_retrieval = false` so raw policy
    /// embeddings reach the KT model unsnapped.
    pub fn rollout<P: Policy + ?Sized>(
        &mut self,
        policy: &mut P,
        use_retrieval: bool,
    ) -> Result<Vec<Vec<StepOutcome>>> {
        let n = self.states.len();
        let mut paths: Vec<Vec<StepOutcome>> = vec![Vec::with_capacity(self.cfg.horizon); n];
        while !self.all_done() {
            let actions = policy.act(&self.states);
            let outs = self.step_batch(&actions, use_retrieval)?;
            for (p, o) in paths.iter_mut().zip(outs) {
                p.push(o);
            }
        }
        Ok(paths)
    }
}

/// Argmin of predict_knowledge over all KCs, evaluated as one batched
/// classifier pass over the KC vectors; ties go to the lowest KC id.
pub fn weakest_kc(model: &KTModel, state: &StudentState, space: &EmbeddingSpace) -> Result<u32> {
    if space.num_kcs() == 0 {
        return Err(Error::data("no KCs to select a target from".to_string()));
    }
    let scores = model.classifier_scores(&state.hidden, space.kc_vecs())?;
    weakest_index(scores.row_slice(0))
        .map(|i| i as u32)
        .ok_or_else(|| Error::training("knowledge scores are not comparable".to_string()))
}

/// Argmin with ties broken toward the lowest index. None when the input is
/// empty or nothing compares below infinity.
pub fn weakest_index(values: &[Real]) -> Option<usize> {
    let mut best = None;
    let mut best_val = Real::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v < best_val {
            best_val = v;
            best = Some(i);
        }
    }
    best
}

fn knowledge_of(
    model: &KTModel,
    state: &StudentState,
    space: &EmbeddingSpace,
    targets: &[u32],
) -> Result<Vec<Real>> {
    targets
        .iter()
        .map(|&c| model.predict_knowledge(state, space.kc(c as usize)))
        .collect()
}

fn mean(xs: &[Real]) -> Real {
    xs.iter().sum::<Real>() / xs.len() as Real
}
