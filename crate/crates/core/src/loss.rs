//! Training objectives: the symmetric cross-modal contrastive loss, the
//! multi-label focal loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bounds applied to `p_t` before taking its log.
pub const FOCAL_PT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub omega_fl: f64,
    pub omega_cl: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            omega_fl: 1.0,
            omega_cl: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.omega_fl >= 0.0 && self.omega_cl >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be non-negative".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::Config("focal_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One direction of the contrastive loss given the `B x B` similarity
/// matrix whose diagonal holds the positive pairs. The denominator runs over
/// the off-diagonal entries of each row only.
fn directional(tape: &mut Tape, cos: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(cos).rows();
    let inv_t = 1.0 / temperature;
    let scaled = tape.scale(cos, inv_t);
    let eye = tape.constant(Tensor::eye(b));
    let diag = tape.mul(scaled, eye)?;
    let positives = tape.sum(diag);
    // |cos| <= 1, so shifting by 1/t keeps every exponent <= 0
    let shifted = tape.shift(scaled, -inv_t);
    let expd = tape.exp(shifted)?;
    let mut mask = Tensor::ones(&[b, b]);
    for i in 0..b {
        mask.data_mut()[i * b + i] = 0.0;
    }
    let off_diag = tape.constant(mask);
    let negatives = tape.mul(expd, off_diag)?;
    let ones = tape.constant(Tensor::ones(&[b, 1]));
    let row_sums = tape.matmul(negatives, ones)?;
    let logs = tape.log(row_sums)?;
    let log_total = tape.sum(logs);
    let diff = tape.sub(positives, log_total)?;
    let loss = tape.scale(diff, -1.0 / b as f64);
    Ok(tape.shift(loss, inv_t))
}

/// `L_{v->a} + L_{a->v}` over pooled per-clip embeddings (`B x h` each).
pub fn contrastive_loss(tape: &mut Tape, audio: Var, video: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(audio).rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let cos = tape.cosine_similarity(audio, video)?;
    let v_to_a = directional(tape, cos, temperature)?;
    let cos_t = tape.transpose(cos)?;
    let a_to_v = directional(tape, cos_t, temperature)?;
    tape.add(v_to_a, a_to_v)
}

/// Mean over all `B x C` entries of `-alpha (1 - p_t)^gamma ln p_t`, with
/// `p = sigmoid(logit)` and `p_t` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if labels.shape() != shape.as_slice() {
        return Err(Error::shape("focal_loss", &shape, labels.shape()));
    }
    if let Some(&y) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain {
            op: "focal_loss",
            detail: format!("label {y} is not binary"),
        });
    }
    let p = tape.sigmoid(logits);
    // p_t = y p + (1 - y)(1 - p) = (2y - 1) p + (1 - y)
    let sign = tape.constant(labels.map(|y| 2.0 * y - 1.0));
    let offset = tape.constant(labels.map(|y| 1.0 - y));
    let signed = tape.mul(p, sign)?;
    let pt = tape.add(signed, offset)?;
    let pt = tape.clamp(pt, FOCAL_PT_EPS, 1.0 - FOCAL_PT_EPS);
    let log_pt = tape.log(pt)?;
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let neg = tape.scale(pt, -1.0);
        let one_minus = tape.shift(neg, 1.0);
        let modulator = tape.pow(one_minus, gamma)?;
        tape.mul(modulator, log_pt)?
    };
    let mean = tape.mean(weighted);
    Ok(tape.scale(mean, -alpha))
}

/// `omega_fl * fl + omega_cl * cl`.
pub fn total_loss(tape: &mut Tape, fl: Var, cl: Var, cfg: &LossConfig) -> Result<Var> {
    let a = tape.scale(fl, cfg.omega_fl);
    let b = tape.scale(cl, cfg.omega_cl);
    tape.add(a, b)
}

pub fn total_loss_value(fl: f64, cl: f64, cfg: &LossConfig) -> f64 {
    cfg.omega_fl * fl + cfg.omega_cl * cl
}
