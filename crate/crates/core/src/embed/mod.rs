//! Shared semantic space for questions, solution steps, and KCs.
//!
//! A bag-of-tokens encoder maps each text to a unit vector; contrastive
//! training pulls questions and steps toward the KCs they practice and
//! pushes them from the rest, with same-cluster KCs excluded from the
//! negative pool so near-duplicate concepts are never treated as negatives.
//! The trained space is frozen and persisted; downstream modules only read.

mod cluster;
mod encoder;
mod io;
mod loss;
mod retrieval;
mod train;

#[cfg(test)]
mod tests;

pub use cluster::{cluster_kcs, ClusterAssignment};
pub use encoder::{Kind, TextEncoder};
pub use io::{load_space, save_space};
pub use loss::{contrastive_loss, contrastive_loss_vec, cosine, total_contrastive_loss};
// Question-side and step-side losses share one formula; both names exist
// so call sites read like the model description.
pub use loss::contrastive_loss as contrastive_loss_q;
pub use loss::contrastive_loss as contrastive_loss_s;
pub use retrieval::{retrieval_f1, retrieval_report, RetrievalReport};
pub use train::{train_embeddings, EmbedTraining};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct EmbedConfig {
    /// Output dimension d of the shared space.
    pub dim: usize,
    /// Token embedding width before projection.
    pub d_tok: usize,
    /// Softmax temperature in the contrastive losses.
    pub tau: f64,
    /// Cosine-distance threshold for KC clustering.
    pub cluster_threshold: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a loss improvement
    /// larger than `plateau_tol`.
    pub plateau_patience: usize,
    pub plateau_tol: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 32,
            d_tok: 32,
            tau: 0.1,
            cluster_threshold: 0.15,
            batch_size: 32,
            lr: 0.01,
            max_epochs: 50,
            plateau_patience: 5,
            plateau_tol: 1e-4,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.d_tok == 0 {
            return Err(Error::config("embedding dimensions must be positive"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("temperature tau must be positive"));
        }
        if !(0.0..=2.0).contains(&self.cluster_threshold) {
            return Err(Error::config("cluster_threshold must be in [0, 2]"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Frozen embedding space: one unit vector per question, solution step and
/// KC, the KC cluster assignment, and the encoder that produced them (kept
/// so corpus extensions can be embedded consistently later).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpace {
    dim: usize,
    question_vecs: Tensor,
    /// All step vectors stacked; question q owns rows
    /// `step_offsets[q]..step_offsets[q+1]`.
    step_vecs: Tensor,
    step_offsets: Vec<u32>,
    kc_vecs: Tensor,
    assignment: ClusterAssignment,
    encoder: TextEncoder,
}

impl EmbeddingSpace {
    /// Encode every question, step and KC of `corpus` with `encoder`, then
    /// cluster the KC vectors at `threshold`.
    pub fn build(encoder: TextEncoder, corpus: &Corpus, threshold: f64) -> Result<Self> {
        let dim = encoder.dim();
        let mut question_vecs = Tensor::zeros(corpus.num_questions(), dim);
        let mut step_offsets = Vec::with_capacity(corpus.num_questions() + 1);
        step_offsets.push(0u32);
        let total_steps: usize = corpus.questions.iter().map(|q| q.solution_steps.len()).sum();
        let mut step_vecs = Tensor::zeros(total_steps, dim);
        let mut next_step = 0usize;
        for (i, q) in corpus.questions.iter().enumerate() {
            question_vecs
                .row_slice_mut(i)
                .copy_from_slice(&encoder.encode(Kind::Question, &q.text));
            for s in &q.solution_steps {
                step_vecs
                    .row_slice_mut(next_step)
                    .copy_from_slice(&encoder.encode(Kind::Step, s));
                next_step += 1;
            }
            step_offsets.push(next_step as u32);
        }
        let mut kc_vecs = Tensor::zeros(corpus.num_kcs(), dim);
        for (i, kc) in corpus.kcs.iter().enumerate() {
            kc_vecs
                .row_slice_mut(i)
                .copy_from_slice(&encoder.encode(Kind::Kc, &kc.template_tokens));
        }
        let assignment = cluster_kcs(&kc_vecs, threshold)?;
        Ok(EmbeddingSpace {
            dim,
            question_vecs,
            step_vecs,
            step_offsets,
            kc_vecs,
            assignment,
            encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_questions(&self) -> usize {
        self.question_vecs.rows()
    }

    pub fn num_kcs(&self) -> usize {
        self.kc_vecs.rows()
    }

    pub fn question(&self, qid: usize) -> &[Real] {
        self.question_vecs.row_slice(qid)
    }

    pub fn kc(&self, kc: usize) -> &[Real] {
        self.kc_vecs.row_slice(kc)
    }

    pub fn kc_vecs(&self) -> &Tensor {
        &self.kc_vecs
    }

    pub fn num_steps(&self, qid: usize) -> usize {
        (self.step_offsets[qid + 1] - self.step_offsets[qid]) as usize
    }

    pub fn step(&self, qid: usize, k: usize) -> &[Real] {
        debug_assert!(k < self.num_steps(qid));
        self.step_vecs
            .row_slice(self.step_offsets[qid] as usize + k)
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    /// Fused question embedding used as KT input: the un-normalized average
    /// of the question vector and its mean step vector.
    pub fn fused(&self, qid: usize) -> Vec<Real> {
        let steps: Vec<&[Real]> = (0..self.num_steps(qid)).map(|k| self.step(qid, k)).collect();
        fuse_question_embedding(self.question(qid), &steps)
    }

    /// Fused embeddings for all questions, one row each.
    pub fn fused_all(&self) -> Tensor {
        let mut out = Tensor::zeros(self.num_questions(), self.dim);
        for q in 0..self.num_questions() {
            out.row_slice_mut(q).copy_from_slice(&self.fused(q));
        }
        out
    }

    pub(crate) fn parts(
        &self,
    ) -> (
        &Tensor,
        &Tensor,
        &[u32],
        &Tensor,
        &ClusterAssignment,
        &TextEncoder,
    ) {
        (
            &self.question_vecs,
            &self.step_vecs,
            &self.step_offsets,
            &self.kc_vecs,
            &self.assignment,
            &self.encoder,
        )
    }

    pub(crate) fn from_parts(
        question_vecs: Tensor,
        step_vecs: Tensor,
        step_offsets: Vec<u32>,
        kc_vecs: Tensor,
        assignment: ClusterAssignment,
        encoder: TextEncoder,
    ) -> Result<Self> {
        let dim = encoder.dim();
        if question_vecs.cols() != dim
            || step_vecs.cols() != dim
            || kc_vecs.cols() != dim
            || step_offsets.len() != question_vecs.rows() + 1
            || *step_offsets.last().unwrap_or(&0) as usize != step_vecs.rows()
            || assignment.num_kcs() != kc_vecs.rows()
        {
            return Err(Error::data("embedding space parts are inconsistent".to_string()));
        }
        Ok(EmbeddingSpace {
            dim,
            question_vecs,
            step_vecs,
            step_offsets,
            kc_vecs,
            assignment,
            encoder,
        })
    }
}

/// `(z_q + mean_k z_step_k) / 2`, deliberately not re-normalized.
pub fn fuse_question_embedding(z_q: &[Real], steps: &[&[Real]]) -> Vec<Real> {
    assert!(!steps.is_empty(), "fuse needs at least one step vector");
    let d = z_q.len();
    let mut mean = vec![0.0; d];
    for s in steps {
        debug_assert_eq!(s.len(), d);
        for (m, &x) in mean.iter_mut().zip(s.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / steps.len() as Real;
    for (m, &q) in mean.iter_mut().zip(z_q.iter()) {
        *m = (q + *m * inv) * 0.5;
    }
    mean
}
