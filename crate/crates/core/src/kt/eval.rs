//! Evaluation: ranking AUC over next-response predictions, the sampled
//! knowledge-state oracle, and the KC-level MAE sweep that compares direct
//! knowledge predictions against that oracle.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::{Corpus, StudentTrace};
use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numcore::stream;
use crate::{Real, Tensor};

use super::model::{KTModel, StudentState};

/// Mann-Whitney AUC with midranks for tied scores.
pub fn auc(pairs: &[(Real, u8)]) -> Result<Real> {
    if pairs
        .iter()
        .any(|&(s, y)| !s.is_finite() || y > 1)
    {
        return Err(Error::data("AUC needs finite scores and binary labels".to_string()));
    }
    let n_pos = pairs.iter().filter(|p| p.1 == 1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUC needs both response classes".to_string()));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).unwrap());
    let mut rank_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && pairs[idx[j]].0 == pairs[idx[i]].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank.
        let mid = (i + 1 + j) as Real / 2.0;
        for &t in &idx[i..j] {
            if pairs[t].1 == 1 {
                rank_pos += mid;
            }
        }
        i = j;
    }
    let u = rank_pos - (n_pos * (n_pos + 1)) as Real / 2.0;
    Ok(u / (n_pos as Real * n_neg as Real))
}

/// Fixed question samples per KC for the knowledge-state oracle. The draw is
/// seeded per KC, so pools do not depend on evaluation order and stay stable
/// across epochs.
#[derive(Clone, Debug)]
pub struct OraclePools {
    pools: Vec<Vec<u32>>,
}

impl OraclePools {
    pub fn build(corpus: &Corpus, sample_size: usize, seed: u64) -> Result<Self> {
        if sample_size == 0 {
            return Err(Error::config("oracle sample_size must be positive"));
        }
        let mut pools = Vec::with_capacity(corpus.num_kcs());
        for kc in 0..corpus.num_kcs() as u32 {
            let mut all = corpus.questions_with_kc(kc);
            if all.is_empty() {
                return Err(Error::data(format!("KC {kc} has no questions to sample")));
            }
            let pool = if all.len() <= sample_size {
                all
            } else {
                let mut rng = stream(seed, "kt-oracle", kc as u64);
                let (chosen, _) = all.partial_shuffle(&mut rng, sample_size);
                let mut v = chosen.to_vec();
                v.sort_unstable();
                v
            };
            pools.push(pool);
        }
        Ok(OraclePools { pools })
    }

    pub fn num_kcs(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, kc: usize) -> &[u32] {
        &self.pools[kc]
    }
}

/// Mean predicted correctness over the KC's sampled questions at `hidden`.
pub(crate) fn oracle_at_hidden(
    model: &KTModel,
    hidden: &Tensor,
    kc: usize,
    space: &EmbeddingSpace,
    pools: &OraclePools,
) -> Result<Real> {
    if kc >= pools.num_kcs() {
        return Err(Error::data(format!("KC {kc} out of range for oracle pools")));
    }
    let pool = pools.pool(kc);
    let d = space.dim();
    let mut q = Tensor::zeros(pool.len(), d);
    for (r, &qid) in pool.iter().enumerate() {
        q.row_slice_mut(r).copy_from_slice(&space.fused(qid as usize));
    }
    let probs = model.classifier_scores(hidden, &q)?;
    let row = probs.row_slice(0);
    Ok(row.iter().sum::<Real>() / row.len() as Real)
}

/// Expected performance on the KC, estimated by averaging the model's
/// predictions over the KC's sampled questions.
pub fn knowledge_state_oracle(
    model: &KTModel,
    state: &StudentState,
    kc: usize,
    space: &EmbeddingSpace,
    pools: &OraclePools,
) -> Result<Real> {
    oracle_at_hidden(model, &state.hidden, kc, space, pools)
}

/// Teacher-forced predictions over whole traces, pooled as (score, label).
/// Traces are grouped by length and replayed batched; rows are independent,
/// so this matches the sequential path bit for bit.
pub(crate) fn response_pairs(
    model: &KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
) -> Result<Vec<(Real, u8)>> {
    let fused = space.fused_all();
    let d = space.dim();
    let mut groups: BTreeMap<usize, Vec<&StudentTrace>> = BTreeMap::new();
    for tr in traces {
        groups.entry(tr.len()).or_default().push(tr);
    }
    let mut out = Vec::new();
    for (len, group) in groups {
        if len == 0 {
            continue;
        }
        let b = group.len();
        let (mut h, mut c) = model.initial_batch(b);
        for i in 0..len {
            let mut q = Tensor::zeros(b, d);
            let mut resp = Vec::with_capacity(b);
            for (g, tr) in group.iter().enumerate() {
                let (qid, y) = tr.steps[i];
                q.row_slice_mut(g).copy_from_slice(fused.row_slice(qid as usize));
                resp.push(y);
            }
            let probs = model.predict_response_rows(&h, &q)?;
            for (g, tr) in group.iter().enumerate() {
                out.push((probs[g], tr.steps[i].1));
            }
            if i + 1 < len {
                let rows: Vec<&[Real]> = (0..b).map(|g| q.row_slice(g)).collect();
                let (h2, c2) = model.advance_batch(&h, &c, &rows, &resp)?;
                h = h2;
                c = c2;
            }
        }
    }
    Ok(out)
}

/// Held-out next-response AUC over all trace steps.
pub fn evaluate_auc(
    model: &KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
) -> Result<Real> {
    auc(&response_pairs(model, traces, space)?)
}

fn fold_full(model: &KTModel, trace: &StudentTrace, space: &EmbeddingSpace) -> Result<StudentState> {
    let mut state = model.initial_state();
    for &(qid, y) in &trace.steps {
        let f = space.fused(qid as usize);
        state = model.advance_state(&state, &f, y)?;
    }
    Ok(state)
}

/// Mean |direct KC prediction - sampled oracle| over (student, KC) pairs,
/// evaluated at each student's end-of-trace state.
pub fn knowledge_mae(
    model: &KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
    pools: &OraclePools,
) -> Result<Real> {
    if traces.is_empty() || space.num_kcs() == 0 {
        return Err(Error::data("knowledge MAE needs traces and KCs".to_string()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in traces {
        let state = fold_full(model, tr, space)?;
        for kc in 0..space.num_kcs() {
            let direct = model.predict_knowledge(&state, space.kc(kc))?;
            let orc = oracle_at_hidden(model, &state.hidden, kc, space, pools)?;
            sum += (direct - orc).abs();
            n += 1;
        }
    }
    Ok(sum / n as Real)
}

/// One evaluation record per trace step. `auc_contrib` is the probability
/// the model assigned to the response that was actually observed; `kc_mae`
/// is filled on each trace's final step, from the end-of-trace state.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub student_id: u32,
    pub step: usize,
    pub auc_contrib: Real,
    pub kc_mae: Option<Real>,
}

pub fn eval_rows(
    model: &KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
    pools: &OraclePools,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for tr in traces {
        let mut state = model.initial_state();
        for (i, &(qid, y)) in tr.steps.iter().enumerate() {
            let f = space.fused(qid as usize);
            let p = model.predict_response(&state, &f)?;
            let contrib = if y == 1 { p } else { 1.0 - p };
            state = model.advance_state(&state, &f, y)?;
            let kc_mae = if i + 1 == tr.len() {
                let mut sum = 0.0;
                for kc in 0..space.num_kcs() {
                    let direct = model.predict_knowledge(&state, space.kc(kc))?;
                    let orc = oracle_at_hidden(model, &state.hidden, kc, space, pools)?;
                    sum += (direct - orc).abs();
                }
                Some(sum / space.num_kcs() as Real)
            } else {
                None
            };
            rows.push(EvalRow {
                student_id: tr.student_id,
                step: i,
                auc_contrib: contrib,
                kc_mae,
            });
        }
    }
    Ok(rows)
}
