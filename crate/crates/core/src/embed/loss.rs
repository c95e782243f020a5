//! Contrastive losses, plain-math form.
//!
//! Training runs the same formula through the tape (see train.rs); this
//! module is the reference implementation used by tests and evaluation.

use crate::corpus::Question;
use crate::error::{Error, Result};
use crate::Real;

use super::EmbeddingSpace;

pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let dot: Real = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: Real = a.iter().map(|&x| x * x).sum::<Real>().sqrt();
    let nb: Real = b.iter().map(|&x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// InfoNCE with the positive kept in the denominator:
/// `-log softmax(sim_pos / tau)` over the positive plus negatives.
/// An empty negative set is a degenerate softmax of one and costs zero.
pub fn contrastive_loss(sim_pos: Real, neg_sims: &[Real], tau: f64) -> Result<Real> {
    if tau <= 0.0 {
        return Err(Error::config("temperature tau must be positive"));
    }
    if neg_sims.is_empty() {
        return Ok(0.0);
    }
    let pos = sim_pos / tau;
    let mut max = pos;
    for &s in neg_sims {
        max = max.max(s / tau);
    }
    let mut sum = (pos - max).exp();
    for &s in neg_sims {
        sum += (s / tau - max).exp();
    }
    Ok(sum.ln() + max - pos)
}

/// Vector form: cosine similarities against the positive and each negative.
pub fn contrastive_loss_vec(
    anchor: &[Real],
    positive: &[Real],
    negatives: &[&[Real]],
    tau: f64,
) -> Result<Real> {
    let pos = cosine(anchor, positive);
    let negs: Vec<Real> = negatives.iter().map(|n| cosine(anchor, n)).collect();
    contrastive_loss(pos, &negs, tau)
}

/// Eq-9-style combined loss for one question against the full KC pool of
/// `space`, with same-cluster KCs removed from the negatives.
pub fn total_contrastive_loss(question: &Question, space: &EmbeddingSpace, tau: f64) -> Result<Real> {
    let m = question.kcs.len();
    let n = question.solution_steps.len();
    if m == 0 || n == 0 {
        return Err(Error::data(format!(
            "question {} lacks KCs or steps",
            question.id
        )));
    }
    let assignment = space.assignment();
    let negatives_of = |pos: u32| -> Vec<&[Real]> {
        (0..space.num_kcs() as u32)
            .filter(|&k| k != pos && !assignment.same_cluster(k, pos))
            .map(|k| space.kc(k as usize))
            .collect()
    };
    let z_q = space.question(question.id as usize);
    let mut q_term = 0.0;
    for &c in &question.kcs {
        q_term += contrastive_loss_vec(z_q, space.kc(c as usize), &negatives_of(c), tau)?;
    }
    q_term /= m as Real;
    let mut s_term = 0.0;
    for k in 0..n {
        let kcs_of_step: Vec<u32> = question.step_kcs(k).collect();
        debug_assert!(!kcs_of_step.is_empty());
        let z_s = space.step(question.id as usize, k);
        let mut step_sum = 0.0;
        for &c in &kcs_of_step {
            step_sum += contrastive_loss_vec(z_s, space.kc(c as usize), &negatives_of(c), tau)?;
        }
        s_term += step_sum / kcs_of_step.len() as Real;
    }
    s_term /= n as Real;
    Ok(q_term + s_term)
}
