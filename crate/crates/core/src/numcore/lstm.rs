//! Gated recurrent (LSTM) cell with a tape path for training and a plain
//! batched path for inference. Both compose the same dense kernels in the
//! same order, so their outputs agree bitwise.

use rand::Rng;

use super::dense;
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cell parameters. Gate order along the `4H` axis is `[i | f | g | o]`
/// (input, forget, candidate, output).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
    input_dim: usize,
    hidden: usize,
}

/// Tape handles for the cell parameters.
#[derive(Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(input_dim, 4 * hidden),
            w_h: Tensor::zeros(hidden, 4 * hidden),
            b: Tensor::zeros(1, 4 * hidden),
            input_dim,
            hidden,
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; biases zero
    /// except the forget gate, which starts at 1 to keep early memory open.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = LstmParams {
            w_x: Tensor::uniform_init(input_dim, 4 * hidden, input_dim, rng),
            w_h: Tensor::uniform_init(hidden, 4 * hidden, hidden, rng),
            b: Tensor::zeros(1, 4 * hidden),
            input_dim,
            hidden,
        };
        for j in hidden..2 * hidden {
            p.b.set(0, j, T::one());
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> [&Tensor<T>; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.w_x.set_requires_grad(on);
        self.w_h.set_requires_grad(on);
        self.b.set_requires_grad(on);
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> LstmVars {
        LstmVars {
            w_x: tape.leaf(&self.w_x),
            w_h: tape.leaf(&self.w_h),
            b: tape.leaf(&self.b),
        }
    }

    fn check_step(&self, x: [usize; 2], h: [usize; 2], c: [usize; 2]) -> Result<()> {
        let ok = x[1] == self.input_dim
            && h[1] == self.hidden
            && c[1] == self.hidden
            && x[0] == h[0]
            && h[0] == c[0];
        if !ok {
            return Err(Error::Dim {
                op: "lstm_step",
                lhs: vec![x[0], x[1], h[1], c[1]],
                rhs: vec![x[0], self.input_dim, self.hidden, self.hidden],
            });
        }
        Ok(())
    }

    /// One batched step on the tape: rows of `x`, `h`, `c` are independent
    /// sequences. Returns `(h', c')`.
    pub fn step_tape(
        &self,
        tape: &mut Tape<T>,
        vars: LstmVars,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        self.check_step(tape.shape(x), tape.shape(h), tape.shape(c))?;
        let hh = self.hidden;
        let a1 = tape.matmul(x, vars.w_x)?;
        let a2 = tape.matmul(h, vars.w_h)?;
        let s = tape.add(a1, a2)?;
        let pre = tape.add_row(s, vars.b)?;
        let i_pre = tape.slice_cols(pre, 0, hh)?;
        let f_pre = tape.slice_cols(pre, hh, 2 * hh)?;
        let g_pre = tape.slice_cols(pre, 2 * hh, 3 * hh)?;
        let o_pre = tape.slice_cols(pre, 3 * hh, 4 * hh)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let c_tanh = tape.tanh(c_new);
        let h_new = tape.mul(o, c_tanh)?;
        Ok((h_new, c_new))
    }

    /// One batched step without a tape. Same arithmetic order as
    /// [`Self::step_tape`].
    pub fn step(&self, x: &Tensor<T>, h: &Tensor<T>, c: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_step(x.shape(), h.shape(), c.shape())?;
        let b = x.rows();
        let hh = self.hidden;
        let mut pre1 = vec![T::zero(); b * 4 * hh];
        let mut pre2 = vec![T::zero(); b * 4 * hh];
        dense::matmul(x.data(), b, self.input_dim, self.w_x.data(), 4 * hh, &mut pre1);
        dense::matmul(h.data(), b, hh, self.w_h.data(), 4 * hh, &mut pre2);
        for (p, q) in pre1.iter_mut().zip(pre2.iter()) {
            *p = *p + *q;
        }
        dense::add_row_inplace(&mut pre1, b, self.b.data());

        let mut h_new = Tensor::zeros(b, hh);
        let mut c_new = Tensor::zeros(b, hh);
        for r in 0..b {
            let row = &pre1[r * 4 * hh..(r + 1) * 4 * hh];
            for j in 0..hh {
                let i_g = dense::sigmoid(row[j]);
                let f_g = dense::sigmoid(row[hh + j]);
                let g_g = row[2 * hh + j].tanh();
                let o_g = dense::sigmoid(row[3 * hh + j]);
                let cv = f_g * c.get(r, j) + i_g * g_g;
                c_new.set(r, j, cv);
                h_new.set(r, j, o_g * cv.tanh());
            }
        }
        Ok((h_new, c_new))
    }
}
