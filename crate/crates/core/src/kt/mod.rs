//! Knowledge tracing on top of the shared embedding space.
//!
//! An LSTM folds a student's exercise history (fused question embedding plus
//! a learned response embedding) into a latent state. One classifier, queried
//! with either a question or a KC vector, predicts correctness probabilities.
//! After standard next-response training the model is calibrated so that its
//! direct KC predictions match a frozen teacher's question-averaged knowledge
//! estimates.

mod eval;
mod io;
mod model;
mod train;
#[cfg(test)]
mod tests;

pub use eval::{
    auc, eval_rows, evaluate_auc, knowledge_mae, knowledge_state_oracle, EvalRow, OraclePools,
};
pub use io::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use model::{warmup_state, KTModel, StudentState};
pub use train::{calibrate_kt, train_kt, CalibrationTeacher, KTTraining};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug)]
pub struct KTConfig {
    /// LSTM hidden width (the latent student-state dimension).
    pub state_dim: usize,
    pub lr: Real,
    pub epochs: usize,
    /// Epochs for the calibration stage.
    pub calib_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before each Adam step.
    pub grad_clip: Real,
    /// Weight on the KC loss during calibration; 0 degenerates to plain
    /// next-response training.
    pub kc_loss_weight: Real,
    /// Questions sampled per KC for the knowledge-state oracle.
    pub oracle_sample_size: usize,
    pub seed: u64,
}

impl Default for KTConfig {
    fn default() -> Self {
        KTConfig {
            state_dim: 64,
            lr: 0.01,
            epochs: 30,
            calib_epochs: 10,
            batch_size: 16,
            grad_clip: 5.0,
            kc_loss_weight: 1.0,
            oracle_sample_size: 20,
            seed: 7,
        }
    }
}

impl KTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        if self.epochs == 0 || self.calib_epochs == 0 {
            return Err(Error::config("epochs and calib_epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(self.kc_loss_weight >= 0.0 && self.kc_loss_weight.is_finite()) {
            return Err(Error::config("kc_loss_weight must be finite and nonnegative"));
        }
        if self.oracle_sample_size == 0 {
            return Err(Error::config("oracle_sample_size must be positive"));
        }
        Ok(())
    }
}
