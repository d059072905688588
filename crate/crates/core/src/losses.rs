//! Reconstruction KL, pointwise BCE and their weighted sum.

use crate::error::{arg_err, Result};
use crate::model::Prediction;
use crate::numerics::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Variance floor for the batch-moment KL.
pub const MOMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// Unit-variance Gaussians centred at each token: half squared error.
    #[default]
    GaussianIdentity,
    /// Diagonal Gaussians fitted to all rows of the batch.
    BatchMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub kl_mode: KlMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            kl_mode: KlMode::GaussianIdentity,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return arg_err(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        Ok(())
    }
}

/// KL between the reconstruction `S + D` and the clean input, on the graph.
/// All three operands share a shape whose last dim is the embedding width.
pub fn kl_loss(g: &mut Graph, s: Var, d: Var, x_input: Var, mode: KlMode) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if g.shape(d) != shape.as_slice() || g.shape(x_input) != shape.as_slice() || shape.is_empty() {
        return arg_err(format!(
            "kl shapes differ: {:?}, {:?}, {:?}",
            shape,
            g.shape(d),
            g.shape(x_input)
        ));
    }
    let width = *shape.last().unwrap();
    let rows = g.value(s).numel() / width;
    let recon = g.add(s, d)?;
    match mode {
        KlMode::GaussianIdentity => {
            let diff = g.sub(recon, x_input)?;
            let sq = g.square(diff);
            let total = g.sum_all(sq);
            Ok(g.scale(total, 0.5 / rows as f64))
        }
        KlMode::BatchMoment => {
            let p = g.reshape(recon, &[rows, width])?;
            let q = g.reshape(x_input, &[rows, width])?;
            let (mp, vp) = moments(g, p)?;
            let (mq, vq) = moments(g, q)?;
            // 0.5 ln(vq / vp) + (vp + (mp - mq)^2) / (2 vq) - 0.5, summed over dims
            let lq = g.ln(vq);
            let lp = g.ln(vp);
            let log_ratio = g.sub(lq, lp)?;
            let dm = g.sub(mp, mq)?;
            let dm2 = g.square(dm);
            let num = g.add(vp, dm2)?;
            let inv = g.recip(vq);
            let frac = g.mul(num, inv)?;
            let terms = g.add(log_ratio, frac)?;
            let total = g.sum_all(terms);
            let half = g.scale(total, 0.5);
            let offset = g.constant(Tensor::scalar(-0.5 * width as f64));
            g.add(half, offset)
        }
    }
}

/// Per-column mean and floored population variance of a `[rows, d]` matrix.
fn moments(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let mean = g.mean_axis(x, 0)?;
    let c = g.sub(x, mean)?;
    let c2 = g.square(c);
    let var = g.mean_axis(c2, 0)?;
    let eps = g.constant(Tensor::scalar(MOMENT_EPS));
    Ok((mean, g.add(var, eps)?))
}

/// Stable `-[y ln s(z) + (1 - y) ln(1 - s(z))]` from a logit.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn bce_loss(pred: &Prediction, label: f64) -> f64 {
    bce_from_logit(pred.logit, label)
}

pub fn total_loss(bce: f64, kl: f64, cfg: &LossConfig) -> f64 {
    bce + cfg.lambda * kl
}

/// `bce + lambda * kl` on the graph.
pub fn total_loss_var(g: &mut Graph, bce: Var, kl: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = g.scale(kl, cfg.lambda);
    g.add(bce, weighted)
}

#[cfg(test)]
#[path = "losses_tests.rs"]
mod tests;
