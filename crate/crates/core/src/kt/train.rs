//! Teacher-forced next-response training and KC calibration.
//!
//! One graph builder serves both stages: the calibration pass adds a second
//! BCE term whose targets come from a frozen teacher checkpoint, so a zero
//! KC weight degenerates to exactly the plain training path (same code, no
//! extra random draws).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Corpus, StudentTrace};
use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numcore::tape::Var;
use crate::numcore::{clip_global_norm, grads_for, stream, Adam, AdamConfig};
use crate::{Real, Tape, Tensor};

use super::eval::{oracle_at_hidden, OraclePools};
use super::model::{KTModel, KTVars};
use super::KTConfig;

/// Clamp for BCE probabilities; sigmoid can saturate to exactly 0 or 1 in
/// f64 for large logits.
const BCE_EPS: Real = 1e-12;

#[derive(Clone, Debug)]
pub struct KTTraining {
    pub model: KTModel,
    /// Mean per-trace loss for each epoch.
    pub epoch_losses: Vec<Real>,
}

/// Frozen checkpoint plus its fixed per-KC question samples. Calibration
/// targets are computed against this copy so they do not move as the
/// trained model changes.
pub struct CalibrationTeacher {
    model: KTModel,
    pools: OraclePools,
}

impl CalibrationTeacher {
    pub fn new(model: KTModel, corpus: &Corpus, cfg: &KTConfig) -> Result<Self> {
        let pools = OraclePools::build(corpus, cfg.oracle_sample_size, cfg.seed)?;
        Ok(CalibrationTeacher { model, pools })
    }

    pub fn model(&self) -> &KTModel {
        &self.model
    }

    pub fn pools(&self) -> &OraclePools {
        &self.pools
    }
}

/// Per-trace calibration rows: the teacher's oracle estimate for every KC
/// at every pre-step state. Which KC a step trains on is drawn per epoch.
struct CalibTargets {
    rows: Vec<Vec<Vec<Real>>>,
    num_kcs: usize,
}

struct CalibBatchStep {
    kc_ids: Vec<usize>,
    targets: Vec<Real>,
}

struct BatchGraph {
    loss: Var,
    /// Per-step `B x 1` probability nodes, kept for the plain-path
    /// equivalence test.
    #[cfg_attr(not(test), allow(dead_code))]
    step_probs: Vec<Var>,
}

pub fn train_kt(
    model: KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
    cfg: &KTConfig,
) -> Result<KTTraining> {
    run_training(model, traces, space, cfg, cfg.epochs, None)
}

pub fn calibrate_kt(
    model: KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
    teacher: &CalibrationTeacher,
    cfg: &KTConfig,
) -> Result<KTTraining> {
    cfg.validate()?;
    if cfg.kc_loss_weight == 0.0 {
        return run_training(model, traces, space, cfg, cfg.calib_epochs, None);
    }
    let targets = precompute_targets(teacher, traces, space)?;
    run_training(
        model,
        traces,
        space,
        cfg,
        cfg.calib_epochs,
        Some((&targets, cfg.kc_loss_weight)),
    )
}

/// Teacher-side replay: for each trace step, record the teacher's
/// question-averaged knowledge estimate for every KC at the pre-step state.
fn precompute_targets(
    teacher: &CalibrationTeacher,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
) -> Result<CalibTargets> {
    let k = space.num_kcs();
    if k == 0 {
        return Err(Error::data("embedding space has no KCs".to_string()));
    }
    if teacher.model.dim() != space.dim() {
        return Err(Error::Dim {
            op: "calib_teacher",
            lhs: vec![1, teacher.model.dim()],
            rhs: vec![1, space.dim()],
        });
    }
    let mut rows = Vec::with_capacity(traces.len());
    for tr in traces {
        let mut state = teacher.model.initial_state();
        let mut out = Vec::with_capacity(tr.len());
        for (i, &(qid, y)) in tr.steps.iter().enumerate() {
            let mut per_kc = Vec::with_capacity(k);
            for kc in 0..k {
                per_kc.push(oracle_at_hidden(
                    &teacher.model,
                    &state.hidden,
                    kc,
                    space,
                    &teacher.pools,
                )?);
            }
            out.push(per_kc);
            if i + 1 < tr.len() {
                let fused = space.fused(qid as usize);
                state = teacher.model.advance_state(&state, &fused, y)?;
            }
        }
        rows.push(out);
    }
    Ok(CalibTargets { rows, num_kcs: k })
}

fn check_traces(traces: &[StudentTrace], space: &EmbeddingSpace) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::data("no traces to train on".to_string()));
    }
    for tr in traces {
        if tr.len() < 2 {
            return Err(Error::data(format!(
                "student {} trace has {} steps, need at least 2",
                tr.student_id,
                tr.len()
            )));
        }
        for &(qid, y) in &tr.steps {
            if qid as usize >= space.num_questions() {
                return Err(Error::data(format!(
                    "student {} references unknown question {qid}",
                    tr.student_id
                )));
            }
            if y > 1 {
                return Err(Error::data(format!(
                    "student {} has non-binary response {y}",
                    tr.student_id
                )));
            }
        }
    }
    Ok(())
}

fn run_training(
    mut model: KTModel,
    traces: &[StudentTrace],
    space: &EmbeddingSpace,
    cfg: &KTConfig,
    epochs: usize,
    calib: Option<(&CalibTargets, Real)>,
) -> Result<KTTraining> {
    cfg.validate()?;
    check_traces(traces, space)?;
    if model.dim() != space.dim() {
        return Err(Error::Dim {
            op: "kt_train",
            lhs: vec![1, model.dim()],
            rhs: vec![1, space.dim()],
        });
    }
    let fused = space.fused_all();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..traces.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "kt-epoch", epoch as u64));
        // Fresh uniform KC draw per (trace, step) each epoch, indexed by
        // trace so batch composition cannot change the draws.
        let draws: Option<Vec<Vec<usize>>> = calib.map(|(targets, _)| {
            let mut rng = stream(cfg.seed, "kt-calib", epoch as u64);
            traces
                .iter()
                .map(|tr| {
                    (0..tr.len())
                        .map(|_| rng.gen_range(0..targets.num_kcs))
                        .collect()
                })
                .collect()
        });
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&StudentTrace> = chunk.iter().map(|&i| &traces[i]).collect();
            let len = batch.iter().map(|t| t.len()).min().unwrap();
            let mut tape = Tape::new();
            let vars = model.leaves(&mut tape);
            let calib_batch = match calib {
                Some((targets, w)) => {
                    let kc_const = tape.constant(
                        space.num_kcs(),
                        model.dim(),
                        space.kc_vecs().data().to_vec(),
                    )?;
                    let dr = draws.as_ref().unwrap();
                    let steps = (0..len)
                        .map(|i| {
                            let mut kc_ids = Vec::with_capacity(chunk.len());
                            let mut tg = Vec::with_capacity(chunk.len());
                            for &ti in chunk {
                                let kc = dr[ti][i];
                                kc_ids.push(kc);
                                tg.push(targets.rows[ti][i][kc]);
                            }
                            CalibBatchStep { kc_ids, targets: tg }
                        })
                        .collect::<Vec<_>>();
                    Some((kc_const, steps, w))
                }
                None => None,
            };
            let graph = build_batch_graph(
                &mut tape,
                &model,
                &vars,
                &batch,
                len,
                &fused,
                calib_batch
                    .as_ref()
                    .map(|(k, s, w)| (*k, s.as_slice(), *w)),
            )?;
            let loss_val = tape.scalar_value(graph.loss);
            if !loss_val.is_finite() {
                return Err(Error::training(format!(
                    "non-finite loss {loss_val} in epoch {epoch} on a batch of {} traces",
                    batch.len()
                )));
            }
            let grads = tape.backward(graph.loss)?;
            let var_list = vars.list();
            let mut gvecs = grads_for(&grads, &var_list, &model.params());
            clip_global_norm(&mut gvecs, cfg.grad_clip);
            let mut pm = model.params_mut();
            let mut prefs: Vec<&mut Tensor> = pm.iter_mut().map(|t| &mut **t).collect();
            let grefs: Vec<&[Real]> = gvecs.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut prefs, &grefs)?;
            weighted += loss_val * batch.len() as Real;
        }
        epoch_losses.push(weighted / traces.len() as Real);
    }
    Ok(KTTraining { model, epoch_losses })
}

/// Unrolls one batch: at each step the model predicts the step's response
/// from the pre-step state (and, when calibrating, the teacher's knowledge
/// target for one sampled KC), then folds the step into the state.
fn build_batch_graph(
    tape: &mut Tape,
    model: &KTModel,
    vars: &KTVars,
    batch: &[&StudentTrace],
    len: usize,
    fused: &Tensor,
    calib: Option<(Var, &[CalibBatchStep], Real)>,
) -> Result<BatchGraph> {
    let b = batch.len();
    let d = model.dim();
    let hd = model.state_dim();
    let mut h = tape.constant(b, hd, vec![0.0; b * hd])?;
    let mut c = tape.constant(b, hd, vec![0.0; b * hd])?;
    let mut pred_total: Option<Var> = None;
    let mut kc_total: Option<Var> = None;
    let mut step_probs = Vec::with_capacity(len);
    for i in 0..len {
        let mut qdata = Vec::with_capacity(b * d);
        let mut targets = Vec::with_capacity(b);
        let mut resp_ids = Vec::with_capacity(b);
        for tr in batch {
            let (qid, y) = tr.steps[i];
            qdata.extend_from_slice(fused.row_slice(qid as usize));
            targets.push(y as Real);
            resp_ids.push(y as usize);
        }
        let q = tape.constant(b, d, qdata)?;
        let probs = model.score_rows_tape(tape, vars, h, q)?;
        step_probs.push(probs);
        let lb = tape.bce(probs, &targets, BCE_EPS)?;
        pred_total = Some(match pred_total {
            Some(t) => tape.add(t, lb)?,
            None => lb,
        });
        if let Some((kc_const, steps, _)) = calib {
            let cs = &steps[i];
            let kcq = tape.gather_rows(kc_const, &cs.kc_ids)?;
            let kprobs = model.score_rows_tape(tape, vars, h, kcq)?;
            let kb = tape.bce(kprobs, &cs.targets, BCE_EPS)?;
            kc_total = Some(match kc_total {
                Some(t) => tape.add(t, kb)?,
                None => kb,
            });
        }
        if i + 1 < len {
            let resp_rows = tape.gather_rows(vars.response, &resp_ids)?;
            let x = tape.concat_cols(q, resp_rows)?;
            let (h2, c2) = model.lstm.step_tape(tape, vars.lstm, x, h, c)?;
            h = h2;
            c = c2;
        }
    }
    let pred_sum = pred_total.expect("len >= 1");
    let pred_mean_b = tape.mean_all(pred_sum);
    let pred_loss = tape.scale(pred_mean_b, 1.0 / len as Real);
    let loss = match (kc_total, calib) {
        (Some(ks), Some((_, _, w))) => {
            let kc_mean_b = tape.mean_all(ks);
            let kc_loss = tape.scale(kc_mean_b, 1.0 / len as Real);
            let weighted = tape.scale(kc_loss, w);
            tape.add(pred_loss, weighted)?
        }
        _ => pred_loss,
    };
    Ok(BatchGraph { loss, step_probs })
}

/// Test hook: per-step probabilities from the training graph, without any
/// parameter update.
#[cfg(test)]
pub(crate) fn forward_probs(
    model: &KTModel,
    batch: &[&StudentTrace],
    space: &EmbeddingSpace,
) -> Result<Vec<Tensor>> {
    let fused = space.fused_all();
    let len = batch.iter().map(|t| t.len()).min().unwrap();
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let graph = build_batch_graph(&mut tape, model, &vars, batch, len, &fused, None)?;
    Ok(graph
        .step_probs
        .iter()
        .map(|&v| tape.to_tensor(v))
        .collect())
}
