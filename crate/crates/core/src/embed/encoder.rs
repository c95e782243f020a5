//! Bag-of-tokens text encoder.

use rand_chacha::ChaCha8Rng;

use crate::corpus::OOV_TOKEN;
use crate::numcore::dense;
use crate::{Real, Tape, Tensor};

use crate::error::Result;
use crate::numcore::Var;

/// Text kind tag; each kind owns a learned offset added before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Question = 0,
    Step = 1,
    Kc = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    token_table: Tensor,
    /// 3 x d_tok, one row per kind.
    kind_offsets: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    vocab: u32,
}

/// Tape handles for the encoder parameters within one graph.
#[derive(Clone, Copy)]
pub struct EncoderVars {
    pub token_table: Var,
    pub kind_offsets: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl TextEncoder {
    /// Offsets start an order of magnitude smaller than pooled token
    /// embeddings; a dominant shared offset would make all same-kind texts
    /// near-parallel at init and collapse the KC clustering.
    pub fn init(vocab: u32, d_tok: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let token_table = Tensor::uniform_init(vocab as usize, d_tok, d_tok, rng);
        let kind_offsets = Tensor::uniform_init(3, d_tok, d_tok * 1024, rng);
        let proj_w = Tensor::uniform_init(d_tok, dim, d_tok, rng);
        let proj_b = Tensor::zeros(1, dim);
        let mut enc = TextEncoder {
            token_table,
            kind_offsets,
            proj_w,
            proj_b,
            vocab,
        };
        enc.set_requires_grad(true);
        enc
    }

    pub fn dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn d_tok(&self) -> usize {
        self.token_table.cols()
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.token_table.set_requires_grad(on);
        self.kind_offsets.set_requires_grad(on);
        self.proj_w.set_requires_grad(on);
        self.proj_b.set_requires_grad(on);
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.token_table,
            &mut self.kind_offsets,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [
            &self.token_table,
            &self.kind_offsets,
            &self.proj_w,
            &self.proj_b,
        ]
    }

    pub(crate) fn from_params(
        token_table: Tensor,
        kind_offsets: Tensor,
        proj_w: Tensor,
        proj_b: Tensor,
    ) -> Self {
        let vocab = token_table.rows() as u32;
        let mut enc = TextEncoder {
            token_table,
            kind_offsets,
            proj_w,
            proj_b,
            vocab,
        };
        enc.set_requires_grad(true);
        enc
    }

    /// Tokens outside the vocabulary collapse onto the reserved OOV id.
    fn map_ids(&self, tokens: &[u32]) -> Vec<usize> {
        tokens
            .iter()
            .map(|&t| {
                if t < self.vocab {
                    t as usize
                } else {
                    OOV_TOKEN as usize
                }
            })
            .collect()
    }

    /// Mean-pool token rows, add the kind offset, project, L2-normalize.
    pub fn encode(&self, kind: Kind, tokens: &[u32]) -> Vec<Real> {
        assert!(!tokens.is_empty(), "encode needs at least one token");
        let d_tok = self.d_tok();
        let ids = self.map_ids(tokens);
        let mut pooled = vec![0.0; d_tok];
        for &id in &ids {
            let row = self.token_table.row_slice(id);
            for (p, &x) in pooled.iter_mut().zip(row.iter()) {
                *p += x;
            }
        }
        let inv = 1.0 / ids.len() as Real;
        pooled.iter_mut().for_each(|x| *x *= inv);
        let offset = self.kind_offsets.row_slice(kind as usize);
        for (p, &o) in pooled.iter_mut().zip(offset.iter()) {
            *p += o;
        }
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        dense::matmul(&pooled, 1, d_tok, self.proj_w.data(), dim, &mut out);
        dense::add_row_inplace(&mut out, 1, self.proj_b.data());
        dense::l2_normalize_rows(&mut out, 1, dim);
        out
    }

    /// Registers the four parameters as leaves on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            token_table: tape.leaf(&self.token_table),
            kind_offsets: tape.leaf(&self.kind_offsets),
            proj_w: tape.leaf(&self.proj_w),
            proj_b: tape.leaf(&self.proj_b),
        }
    }

    /// Tape mirror of `encode` for a batch of texts; one output row per
    /// text, same pooling order as the plain path.
    pub fn encode_rows_tape(
        &self,
        tape: &mut Tape,
        vars: EncoderVars,
        kind: Kind,
        texts: &[&[u32]],
    ) -> Result<Var> {
        debug_assert!(!texts.is_empty());
        let mut rows = Vec::with_capacity(texts.len());
        for &text in texts {
            let ids = self.map_ids(text);
            rows.push(tape.embed_mean(vars.token_table, &ids)?);
        }
        let pooled = tape.concat_rows(&rows)?;
        let offset = tape.gather_rows(vars.kind_offsets, &[kind as usize])?;
        let shifted = tape.add_row(pooled, offset)?;
        let projected = tape.affine(shifted, vars.proj_w, vars.proj_b)?;
        Ok(tape.l2_normalize_rows(projected))
    }
}
