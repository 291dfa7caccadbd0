//! Online instance matching: classification of an embedding against a lookup
//! table holding one running feature per training identity.
//!
//! The table is not trained by gradient. After each optimiser step the row of
//! every identity seen in the batch moves towards its new embedding and is
//! renormalised. Rows start at zero (similarity 0 to everything) and become unit
//! vectors on their first update.

use crate::error::{Error, Result};
use crate::math::{self, Mat};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct OimState {
    /// C×E, one row per identity.
    pub table: Mat,
    pub temperature: f64,
    pub momentum: f64,
}

impl OimState {
    pub fn new(classes: usize, embed: usize, temperature: f64, momentum: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter {
                name: "classes".into(),
                reason: format!("need at least 2 identities, got {classes}"),
            });
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParameter {
                name: "temperature".into(),
                reason: format!("must be positive, got {temperature}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter {
                name: "momentum".into(),
                reason: format!("must lie in [0, 1), got {momentum}"),
            });
        }
        Ok(OimState {
            table: Mat::zeros(classes, embed),
            temperature,
            momentum,
        })
    }

    pub fn classes(&self) -> usize {
        self.table.rows()
    }

    fn check(&self, embedding: &[f64], label: usize) -> Result<()> {
        if label >= self.classes() {
            return Err(Error::InvalidLabel {
                label,
                classes: self.classes(),
            });
        }
        if embedding.len() != self.table.cols() {
            return Err(Error::shape(format!(
                "embedding has {} dims, table has {}",
                embedding.len(),
                self.table.cols()
            )));
        }
        Ok(())
    }
}

/// Loss and class probabilities of one embedding.
pub fn oim_forward(embedding: &[f64], label: usize, state: &OimState) -> Result<(f64, Vec<f64>)> {
    state.check(embedding, label)?;
    let mut logits = state.table.matvec(embedding)?;
    for z in &mut logits {
        *z /= state.temperature;
    }
    cross_entropy(&logits, label)
}

/// `∂loss/∂embedding` given the probabilities from [`oim_forward`]. The table is constant.
pub fn oim_backward(probabilities: &[f64], label: usize, state: &OimState) -> Vec<f64> {
    let mut g = probabilities.to_vec();
    g[label] -= 1.0;
    for v in &mut g {
        *v /= state.temperature;
    }
    state.table.matvec_t(&g).expect("C-vector")
}

/// `row ← normalize(γ·row + (1−γ)·embedding)` for the labelled identity.
///
/// If the blend cancels to (near) zero the row is reset to the embedding.
pub fn oim_update(state: &mut OimState, embedding: &[f64], label: usize) -> Result<()> {
    state.check(embedding, label)?;
    let gamma = state.momentum;
    let row = state.table.row_mut(label);
    let blended: Vec<f64> = row
        .iter()
        .zip(embedding)
        .map(|(r, e)| gamma * r + (1.0 - gamma) * e)
        .collect();
    let next = match math::l2_normalize(&blended) {
        Ok(v) => v,
        Err(Error::DegenerateVector { .. }) => math::l2_normalize(embedding)?,
        Err(e) => return Err(e),
    };
    row.copy_from_slice(&next);
    Ok(())
}

/// `(−log p_label, p)` with `p = softmax(logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let p = math::softmax_row(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if logits[label] == max {
        // log(1 + Σ_{j≠y} e^{z_j − z_y}) stays accurate as p_label → 1.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, z)| (z - max).exp())
            .sum();
        rest.ln_1p()
    } else {
        // log-sum-exp form keeps the loss accurate when p_label underflows.
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    };
    Ok((loss, p))
}

/// Which classification head supervises the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Oim,
    /// Plain learned softmax classifier over identities.
    Softmax,
}

/// Trainable classifier for [`LossKind::Softmax`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// C×E.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, embed: usize) -> Self {
        ClassifierParams {
            w: Mat::zeros(classes, embed),
            b: vec![0.0; classes],
        }
    }
}

/// Per-video or batch-mean objective breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub oim_loss: f64,
    pub diversity_penalty: f64,
    /// Σ over frames of Q, whatever penalty the objective uses.
    pub diversity_q: f64,
    pub total: f64,
    pub probabilities: Vec<f64>,
}
