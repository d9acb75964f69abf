//! Per-iteration history shared by every solver.

use crate::image::Image;

/// One row of solver history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    /// MBIR logs the normal-equation residual norm; the network solvers log
    /// the Huber loss of the scaled residual.
    pub loss: f64,
    /// Steepest-descent step size, when the iteration computed one.
    pub alpha: Option<f64>,
    /// RBP blend weight, when the iteration used one.
    pub beta: Option<f64>,
    /// SNR against ground truth, logged only when a ground truth was given.
    pub snr_db: Option<f64>,
    /// Set when the residual was detected to lie in the operator null space.
    pub null_space: bool,
}

impl IterRecord {
    pub fn new(iteration: usize, loss: f64) -> Self {
        Self { iteration, loss, alpha: None, beta: None, snr_db: None, null_space: false }
    }
}

/// Full history of one reconstruction: per-iteration records, the iteration
/// indices at which checkpoints were written, and the final image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconRun {
    pub records: Vec<IterRecord>,
    pub snapshots: Vec<usize>,
    pub final_image: Image,
}

impl ReconRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn final_snr_db(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.snr_db)
    }
}
