//! Contrastive training with in-batch negatives.

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numcore::{grads_for, stream};
use crate::{Adam, Real, Tape};

use crate::numcore::AdamConfig;

use super::cluster::included_mask;
use super::{EmbedConfig, EmbeddingSpace, Kind, TextEncoder};

pub struct EmbedTraining {
    pub space: EmbeddingSpace,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Softmax entries excluded by the cluster filter get this additive mask;
/// exp(x - max) underflows to exactly 0, removing them from loss and grad.
const MASK: Real = -1e30;

struct BatchAnchors {
    /// Row into the similarity matrix per anchor.
    rows: Vec<usize>,
    /// Column of the positive KC per anchor.
    pos_cols: Vec<usize>,
    /// Additive mask matrix, one row per anchor.
    mask: Vec<Real>,
    /// Loss weight per anchor (includes the 1/batch factor).
    weights: Vec<Real>,
}

impl BatchAnchors {
    fn new() -> Self {
        BatchAnchors {
            rows: Vec::new(),
            pos_cols: Vec::new(),
            mask: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn push(
        &mut self,
        row: usize,
        pos_col: usize,
        included: &[bool],
        weight: Real,
    ) {
        self.rows.push(row);
        self.pos_cols.push(pos_col);
        self.mask
            .extend(included.iter().map(|&inc| if inc { 0.0 } else { MASK }));
        self.weights.push(weight);
    }

    fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Anchor losses for one similarity matrix: gather anchor rows, scale by
/// 1/tau, mask filtered negatives, per-row log-sum-exp minus the positive
/// logit, then the weighted sum.
fn anchored_loss(
    tape: &mut Tape,
    sims: crate::numcore::Var,
    anchors: &BatchAnchors,
    num_kcs: usize,
    tau: f64,
) -> Result<crate::numcore::Var> {
    let rows = tape.gather_rows(sims, &anchors.rows)?;
    let scaled = tape.affine1(rows, 1.0 / tau, 0.0);
    let pos = tape.select_col_per_row(scaled, &anchors.pos_cols)?;
    let mask = tape.constant(anchors.rows.len(), num_kcs, anchors.mask.clone())?;
    let masked = tape.add(scaled, mask)?;
    let lse = tape.log_sum_exp_row(masked);
    let per_anchor = tape.sub(lse, pos)?;
    let weights = tape.constant(anchors.rows.len(), 1, anchors.weights.clone())?;
    let weighted = tape.mul(per_anchor, weights)?;
    Ok(tape.sum_all(weighted))
}

/// Minibatch InfoNCE training over the corpus. Each anchor's negative pool
/// is the batch KC set minus the positive's cluster. KCs are clustered
/// once on the initial encoder output for filtering, and again on the
/// trained vectors for the returned space.
pub fn train_embeddings(corpus: &Corpus, cfg: &EmbedConfig, seed: u64) -> Result<EmbedTraining> {
    cfg.validate()?;
    corpus.validate()?;
    let mut init_rng = stream(seed, "embed-init", 0);
    let encoder = TextEncoder::init(corpus.vocab_size, cfg.d_tok, cfg.dim, &mut init_rng);
    train_embeddings_from(corpus, cfg, seed, encoder)
}

pub(crate) fn train_embeddings_from(
    corpus: &Corpus,
    cfg: &EmbedConfig,
    seed: u64,
    encoder: TextEncoder,
) -> Result<EmbedTraining> {
    let mut encoder = encoder;
    let filter_assignment = {
        let space = EmbeddingSpace::build(encoder.clone(), corpus, cfg.cluster_threshold)?;
        space.assignment().clone()
    };
    debug!(
        "negative filter clusters: {} over {} KCs",
        filter_assignment.num_clusters(),
        filter_assignment.num_kcs()
    );
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut epoch_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut flat_epochs = 0usize;
    let mut stopped_early = false;
    let mut last_good = encoder.clone();
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..corpus.num_questions()).collect();
        order.shuffle(&mut stream(seed, "embed-epoch", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = train_batch(corpus, &mut encoder, &mut adam, cfg, &filter_assignment, chunk)?;
            if !loss.is_finite() {
                // Divergence: roll back to the last epoch-end state so the
                // encoder left behind is usable, then report the failure.
                encoder = last_good;
                let _ = encoder;
                return Err(Error::training(format!(
                    "non-finite contrastive loss in epoch {epoch}; encoder rolled back to last completed epoch"
                )));
            }
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        epoch_losses.push(mean);
        last_good = encoder.clone();
        if best - mean > cfg.plateau_tol {
            best = mean;
            flat_epochs = 0;
        } else {
            flat_epochs += 1;
            if flat_epochs >= cfg.plateau_patience {
                stopped_early = true;
                info!("embedding training plateaued at epoch {epoch}, loss {mean:.6}");
                break;
            }
        }
    }
    let space = EmbeddingSpace::build(encoder, corpus, cfg.cluster_threshold)?;
    Ok(EmbedTraining {
        space,
        epoch_losses,
        stopped_early,
    })
}

fn train_batch(
    corpus: &Corpus,
    encoder: &mut TextEncoder,
    adam: &mut Adam,
    cfg: &EmbedConfig,
    assignment: &super::ClusterAssignment,
    batch: &[usize],
) -> Result<f64> {
    // Batch KC set, sorted; anchors index into it.
    let mut batch_kcs: Vec<u32> = batch
        .iter()
        .flat_map(|&q| corpus.questions[q].kcs.iter().copied())
        .collect();
    batch_kcs.sort_unstable();
    batch_kcs.dedup();
    let col_of = |kc: u32| batch_kcs.binary_search(&kc).expect("kc in batch set");

    let mut tape = Tape::new();
    let vars = encoder.leaves(&mut tape);
    let q_texts: Vec<&[u32]> = batch
        .iter()
        .map(|&q| corpus.questions[q].text.as_slice())
        .collect();
    let z_q = encoder.encode_rows_tape(&mut tape, vars, Kind::Question, &q_texts)?;
    let mut step_texts: Vec<&[u32]> = Vec::new();
    let mut step_row_of = Vec::new();
    for &q in batch {
        let base = step_texts.len();
        for s in &corpus.questions[q].solution_steps {
            step_texts.push(s.as_slice());
        }
        step_row_of.push(base);
    }
    let z_s = encoder.encode_rows_tape(&mut tape, vars, Kind::Step, &step_texts)?;
    let kc_texts: Vec<&[u32]> = batch_kcs
        .iter()
        .map(|&k| corpus.kcs[k as usize].template_tokens.as_slice())
        .collect();
    let z_c = encoder.encode_rows_tape(&mut tape, vars, Kind::Kc, &kc_texts)?;

    let sims_q = tape.matmul_nt(z_q, z_c)?;
    let sims_s = tape.matmul_nt(z_s, z_c)?;

    let inv_b = 1.0 / batch.len() as Real;
    let mut q_anchors = BatchAnchors::new();
    let mut s_anchors = BatchAnchors::new();
    for (bi, &qid) in batch.iter().enumerate() {
        let q = &corpus.questions[qid];
        let m = q.kcs.len() as Real;
        for &c in &q.kcs {
            let pos = col_of(c);
            let included = included_mask(assignment, &batch_kcs, pos);
            debug_assert!(included
                .iter()
                .enumerate()
                .all(|(k, &inc)| inc || assignment.same_cluster(batch_kcs[k], c)));
            q_anchors.push(bi, pos, &included, inv_b / m);
        }
        let n = q.solution_steps.len() as Real;
        for k in 0..q.solution_steps.len() {
            let kcs_of_step: Vec<u32> = q.step_kcs(k).collect();
            let ck = kcs_of_step.len() as Real;
            for &c in &kcs_of_step {
                let pos = col_of(c);
                let included = included_mask(assignment, &batch_kcs, pos);
                s_anchors.push(step_row_of[bi] + k, pos, &included, inv_b / (n * ck));
            }
        }
    }
    debug_assert!(!q_anchors.is_empty() && !s_anchors.is_empty());
    let loss_q = anchored_loss(&mut tape, sims_q, &q_anchors, batch_kcs.len(), cfg.tau)?;
    let loss_s = anchored_loss(&mut tape, sims_s, &s_anchors, batch_kcs.len(), cfg.tau)?;
    let loss = tape.add(loss_q, loss_s)?;
    let loss_val = tape.scalar_value(loss);
    if !loss_val.is_finite() {
        return Ok(loss_val);
    }
    let grads = tape.backward(loss)?;
    let leaf_vars = [vars.token_table, vars.kind_offsets, vars.proj_w, vars.proj_b];
    let params = encoder.params();
    let grad_bufs = grads_for(&grads, &leaf_vars, &params);
    let grad_slices: Vec<&[Real]> = grad_bufs.iter().map(|g| g.as_slice()).collect();
    let mut params_mut = encoder.params_mut();
    adam.step(&mut params_mut, &grad_slices)?;
    Ok(loss_val)
}
