//! Model parameters and the plain (inference) forward paths.
//!
//! The classifier concatenates an up-projected state with a query vector and
//! scores the pair through one tanh hidden layer. The first layer's weight is
//! stored split into a state half and a query half; that is the same linear
//! map as a single matrix over the concatenation, and it keeps the batched
//! plain path and the tape path accumulating in the same order, so the two
//! agree bitwise.

use rand::Rng;

use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::numcore::lstm::{LstmParams, LstmVars};
use crate::numcore::tape::Var;
use crate::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct KTModel {
    /// State encoder over inputs `[fused question | response embedding]`.
    pub lstm: LstmParams<Real>,
    /// Learned response embeddings, row 0 incorrect, row 1 correct.
    pub response: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    /// State half of the scorer's first layer.
    pub w1s: Tensor,
    /// Query half of the scorer's first layer.
    pub w1q: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    dim: usize,
    state_dim: usize,
}

/// Single-student latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub hidden: Tensor,
    pub cell: Tensor,
    pub t: usize,
}

/// Tape handles for all trainable tensors, in [`KTModel::params`] order.
#[derive(Clone, Copy)]
pub(crate) struct KTVars {
    pub lstm: LstmVars,
    pub response: Var,
    pub up_w: Var,
    pub up_b: Var,
    pub w1s: Var,
    pub w1q: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl KTVars {
    pub fn list(&self) -> [Var; 11] {
        [
            self.lstm.w_x,
            self.lstm.w_h,
            self.lstm.b,
            self.response,
            self.up_w,
            self.up_b,
            self.w1s,
            self.w1q,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

impl KTModel {
    pub fn zeros(dim: usize, state_dim: usize) -> Self {
        KTModel {
            lstm: LstmParams::zeros(2 * dim, state_dim),
            response: Tensor::zeros(2, dim),
            up_w: Tensor::zeros(state_dim, dim),
            up_b: Tensor::zeros(1, dim),
            w1s: Tensor::zeros(dim, 2 * dim),
            w1q: Tensor::zeros(dim, 2 * dim),
            b1: Tensor::zeros(1, 2 * dim),
            w2: Tensor::zeros(2 * dim, 1),
            b2: Tensor::zeros(1, 1),
            dim,
            state_dim,
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    /// Both halves of the split first layer use the concatenated fan-in 2d.
    pub fn init(dim: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        let mut m = KTModel {
            lstm: LstmParams::init(2 * dim, state_dim, rng),
            response: Tensor::uniform_init(2, dim, dim, rng),
            up_w: Tensor::uniform_init(state_dim, dim, state_dim, rng),
            up_b: Tensor::zeros(1, dim),
            w1s: Tensor::uniform_init(dim, 2 * dim, 2 * dim, rng),
            w1q: Tensor::uniform_init(dim, 2 * dim, 2 * dim, rng),
            b1: Tensor::zeros(1, 2 * dim),
            w2: Tensor::uniform_init(2 * dim, 1, 2 * dim, rng),
            b2: Tensor::zeros(1, 1),
            dim,
            state_dim,
        };
        m.set_requires_grad(true);
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn params(&self) -> [&Tensor; 11] {
        let [wx, wh, b] = self.lstm.params();
        [
            wx,
            wh,
            b,
            &self.response,
            &self.up_w,
            &self.up_b,
            &self.w1s,
            &self.w1q,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 11] {
        let [wx, wh, b] = self.lstm.params_mut();
        [
            wx,
            wh,
            b,
            &mut self.response,
            &mut self.up_w,
            &mut self.up_b,
            &mut self.w1s,
            &mut self.w1q,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.lstm.set_requires_grad(on);
        self.response.set_requires_grad(on);
        self.up_w.set_requires_grad(on);
        self.up_b.set_requires_grad(on);
        self.w1s.set_requires_grad(on);
        self.w1q.set_requires_grad(on);
        self.b1.set_requires_grad(on);
        self.w2.set_requires_grad(on);
        self.b2.set_requires_grad(on);
    }

    pub(crate) fn leaves(&self, tape: &mut Tape) -> KTVars {
        KTVars {
            lstm: self.lstm.leaves(tape),
            response: tape.leaf(&self.response),
            up_w: tape.leaf(&self.up_w),
            up_b: tape.leaf(&self.up_b),
            w1s: tape.leaf(&self.w1s),
            w1q: tape.leaf(&self.w1q),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    pub fn initial_state(&self) -> StudentState {
        StudentState {
            hidden: Tensor::zeros(1, self.state_dim),
            cell: Tensor::zeros(1, self.state_dim),
            t: 0,
        }
    }

    pub fn initial_batch(&self, batch: usize) -> (Tensor, Tensor) {
        (
            Tensor::zeros(batch, self.state_dim),
            Tensor::zeros(batch, self.state_dim),
        )
    }

    fn check_query_dim(&self, len: usize, op: &'static str) -> Result<()> {
        if len != self.dim {
            return Err(Error::Dim {
                op,
                lhs: vec![1, len],
                rhs: vec![1, self.dim],
            });
        }
        Ok(())
    }

    /// LSTM inputs for a batch: each row is `[fused | z^{y}]`.
    pub fn build_inputs(&self, fused_rows: &[&[Real]], responses: &[u8]) -> Result<Tensor> {
        if fused_rows.len() != responses.len() {
            return Err(Error::data("fused rows and responses differ in length".to_string()));
        }
        let d = self.dim;
        let mut x = Tensor::zeros(fused_rows.len(), 2 * d);
        for (r, (row, &y)) in fused_rows.iter().zip(responses.iter()).enumerate() {
            self.check_query_dim(row.len(), "kt_input")?;
            if y > 1 {
                return Err(Error::data(format!("response must be 0 or 1, got {y}")));
            }
            x.row_slice_mut(r)[..d].copy_from_slice(row);
            x.row_slice_mut(r)[d..].copy_from_slice(self.response.row_slice(y as usize));
        }
        Ok(x)
    }

    /// One recurrent step for a single student.
    pub fn advance_state(
        &self,
        state: &StudentState,
        fused: &[Real],
        response: u8,
    ) -> Result<StudentState> {
        let x = self.build_inputs(&[fused], &[response])?;
        let (h, c) = self.lstm.step(&x, &state.hidden, &state.cell)?;
        Ok(StudentState {
            hidden: h,
            cell: c,
            t: state.t + 1,
        })
    }

    /// One recurrent step for a batch of independent students.
    pub fn advance_batch(
        &self,
        hidden: &Tensor,
        cell: &Tensor,
        fused_rows: &[&[Real]],
        responses: &[u8],
    ) -> Result<(Tensor, Tensor)> {
        let x = self.build_inputs(fused_rows, responses)?;
        self.lstm.step(&x, hidden, cell)
    }

    /// Scores every (state row, query row) pair: result is `B x K`
    /// probabilities. The same kernel backs response prediction (question
    /// queries) and knowledge prediction (KC queries).
    pub fn classifier_scores(&self, hidden: &Tensor, queries: &Tensor) -> Result<Tensor> {
        if hidden.cols() != self.state_dim {
            return Err(Error::Dim {
                op: "classifier_state",
                lhs: vec![hidden.rows(), hidden.cols()],
                rhs: vec![hidden.rows(), self.state_dim],
            });
        }
        self.check_query_dim(queries.cols(), "classifier_query")?;
        let a = self.state_half(hidden);
        let bq = self.query_half(queries);
        let mut out = Tensor::zeros(hidden.rows(), queries.rows());
        for r in 0..hidden.rows() {
            for k in 0..queries.rows() {
                out.set(r, k, self.score_pair(a.row_slice(r), bq.row_slice(k)));
            }
        }
        Ok(out)
    }

    /// Paired scoring: row `r` of `hidden` against row `r` of `queries`.
    pub fn predict_response_rows(&self, hidden: &Tensor, queries: &Tensor) -> Result<Vec<Real>> {
        if hidden.rows() != queries.rows() {
            return Err(Error::Dim {
                op: "predict_rows",
                lhs: vec![hidden.rows(), hidden.cols()],
                rhs: vec![queries.rows(), queries.cols()],
            });
        }
        if hidden.cols() != self.state_dim {
            return Err(Error::Dim {
                op: "classifier_state",
                lhs: vec![hidden.rows(), hidden.cols()],
                rhs: vec![hidden.rows(), self.state_dim],
            });
        }
        self.check_query_dim(queries.cols(), "classifier_query")?;
        let a = self.state_half(hidden);
        let bq = self.query_half(queries);
        Ok((0..hidden.rows())
            .map(|r| self.score_pair(a.row_slice(r), bq.row_slice(r)))
            .collect())
    }

    /// Probability that the student answers the question correctly.
    pub fn predict_response(&self, state: &StudentState, fused: &[Real]) -> Result<Real> {
        self.check_query_dim(fused.len(), "classifier_query")?;
        let q = Tensor::from_vec(1, self.dim, fused.to_vec())?;
        Ok(self.predict_response_rows(&state.hidden, &q)?[0])
    }

    /// Direct knowledge-state prediction: the classifier queried with a KC
    /// vector instead of a question.
    pub fn predict_knowledge(&self, state: &StudentState, kc_vec: &[Real]) -> Result<Real> {
        self.predict_response(state, kc_vec)
    }

    /// `(hidden * up_w + up_b) * w1s`, the state contribution to the scorer
    /// pre-activation.
    fn state_half(&self, hidden: &Tensor) -> Tensor {
        let b = hidden.rows();
        let (hh, d) = (self.state_dim, self.dim);
        let mut proj = vec![0.0; b * d];
        crate::numcore::dense::matmul(hidden.data(), b, hh, self.up_w.data(), d, &mut proj);
        crate::numcore::dense::add_row_inplace(&mut proj, b, self.up_b.data());
        let mut a = Tensor::zeros(b, 2 * d);
        crate::numcore::dense::matmul(&proj, b, d, self.w1s.data(), 2 * d, a.data_mut());
        a
    }

    /// `queries * w1q`, the query contribution to the scorer pre-activation.
    fn query_half(&self, queries: &Tensor) -> Tensor {
        let k = queries.rows();
        let d = self.dim;
        let mut bq = Tensor::zeros(k, 2 * d);
        crate::numcore::dense::matmul(queries.data(), k, d, self.w1q.data(), 2 * d, bq.data_mut());
        bq
    }

    /// `sigmoid(tanh((a + bq) + b1) . w2 + b2)`. Addition and dot-product
    /// order mirror the tape ops exactly.
    fn score_pair(&self, a_row: &[Real], bq_row: &[Real]) -> Real {
        let w2 = self.w2.data();
        let mut acc = 0.0;
        for j in 0..a_row.len() {
            let pre = (a_row[j] + bq_row[j]) + self.b1.data()[j];
            acc += pre.tanh() * w2[j];
        }
        crate::numcore::dense::sigmoid(acc + self.b2.data()[0])
    }

    /// Tape twin of [`Self::predict_response_rows`]: paired rows, returns
    /// `B x 1` probabilities.
    pub(crate) fn score_rows_tape(
        &self,
        tape: &mut Tape,
        vars: &KTVars,
        hidden: Var,
        queries: Var,
    ) -> Result<Var> {
        let proj = tape.affine(hidden, vars.up_w, vars.up_b)?;
        let a = tape.matmul(proj, vars.w1s)?;
        let bq = tape.matmul(queries, vars.w1q)?;
        let s = tape.add(a, bq)?;
        let pre = tape.add_row(s, vars.b1)?;
        let hid = tape.tanh(pre);
        let logit = tape.affine(hid, vars.w2, vars.b2)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Folds the first `warmup` steps of a trace into a fresh state.
pub fn warmup_state(
    model: &KTModel,
    prefix: &[(u32, u8)],
    space: &EmbeddingSpace,
    warmup: usize,
) -> Result<StudentState> {
    if prefix.len() < warmup {
        return Err(Error::data(format!(
            "warmup needs {} steps, trace prefix has {}",
            warmup,
            prefix.len()
        )));
    }
    let mut state = model.initial_state();
    for &(qid, resp) in &prefix[..warmup] {
        let fused = space.fused(qid as usize);
        state = model.advance_state(&state, &fused, resp)?;
    }
    Ok(state)
}
