use super::scalar::{fromf64, tof64, Scalar};
use super::tape::{Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr: fromf64(lr),
            ..Self::default()
        }
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        AdamConfig {
            lr: fromf64(1e-3),
            beta1: fromf64(0.9),
            beta2: fromf64(0.999),
            eps: fromf64(1e-8),
        }
    }
}

/// Bias-corrected adaptive-moment optimizer. One instance owns the moment
/// state for a fixed list of parameter tensors, identified positionally.
pub struct Adam<T> {
    cfg: AdamConfig<T>,
    t: u64,
    slots: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig<T>) -> Self {
        Adam {
            cfg,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig<T> {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: T) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `params` and `grads` must be aligned with each
    /// other and with every previous call on this instance. Non-finite
    /// gradients abort with a training error before any state is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dim {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::Dim {
                op: "adam_step",
                lhs: vec![self.slots.len()],
                rhs: vec![params.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Dim {
                    op: "adam_step",
                    lhs: vec![i, p.len()],
                    rhs: vec![i, g.len()],
                });
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::training(format!(
                    "non-finite gradient at param {i} element {j}"
                )));
            }
        }

        self.t += 1;
        let one = T::one();
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.slots.iter_mut())
        {
            let data = p.data_mut();
            for k in 0..data.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] = data[k] - self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Extracts owned gradients for `vars`, substituting zeros for leaves the
/// loss never touched.
pub fn grads_for<T: Scalar>(
    grads: &Gradients<T>,
    vars: &[Var],
    params: &[&Tensor<T>],
) -> Vec<Vec<T>> {
    vars.iter()
        .zip(params.iter())
        .map(|(v, p)| match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); p.len()],
        })
        .collect()
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g {
            let xf = tof64(x);
            sq += xf * xf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = fromf64::<T>(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}
