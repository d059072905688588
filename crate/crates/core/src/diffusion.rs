//! Variance schedule, forward noising and the reverse chain.
//!
//! Step indices are 1-based throughout: `t = 1..=T`, with `alpha_bar(0) = 1`.
//! The denoiser predicts the clean sequence, and reverse transitions use
//! the Gaussian posterior `q(x_s | x_t, x0_hat)`.

use crate::error::{arg_err, Result};
use crate::numerics::{normal_sample, Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Running sums of `ln(1 - beta)`, for cancellation-free `1 - alpha_bar`.
    log_alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSequence {
    pub x_t: Tensor,
    pub t: usize,
    /// Standardised noise such that `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub eps: Tensor,
}

/// Named noise presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseProfile {
    #[default]
    Default,
    /// Diffusion disabled: the denoiser sees the clean sequence at `t = 1`.
    NoNoise,
    Noise2000,
}

impl NoiseProfile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::Default),
            "nonoise" => Ok(Self::NoNoise),
            "noise2000" => Ok(Self::Noise2000),
            other => arg_err(format!("unknown noise profile '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::NoNoise => "nonoise",
            Self::Noise2000 => "noise2000",
        }
    }

    /// Preset `(T, beta_start, beta_end)`. `NoNoise` keeps the default
    /// schedule so the step embedding table is shaped identically.
    pub fn params(self) -> (usize, f64, f64) {
        match self {
            Self::Default | Self::NoNoise => (50, 0.005, 0.01),
            Self::Noise2000 => (2000, 0.005, 0.1),
        }
    }
}

pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps < 1 {
        return arg_err("schedule needs T >= 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return arg_err(format!(
            "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                return beta_start;
            }
            let f = i as f64 / (t_steps - 1) as f64;
            beta_start * (1.0 - f) + beta_end * f
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    if !(acc > 0.0) || alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
        return arg_err("schedule alpha_bar must stay positive and strictly decreasing");
    }
    let log_alpha_bar = beta
        .iter()
        .scan(0.0, |acc, b| {
            *acc += (-b).ln_1p();
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        log_alpha_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn log_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.log_alpha_bar[t - 1]
        }
    }

    /// `1 - alpha_bar(t)` without cancellation for tiny betas.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        -self.log_alpha_bar(t).exp_m1()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance of `x_{t-1}` given `x_t, x0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * self.one_minus_alpha_bar(t - 1) / self.one_minus_alpha_bar(t)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return arg_err(format!("step {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// Samples the marginal `q(x_t | x0)` directly.
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<NoisedSequence> {
    sched.check_t(t)?;
    let eps = normal_sample(rng, x0.shape(), 0.0, 1.0)?;
    let (a, b) = (
        sched.alpha_bar(t).sqrt(),
        sched.one_minus_alpha_bar(t).sqrt(),
    );
    let x_t = x0.zip_map(&eps, |x, e| a * x + b * e)?;
    Ok(NoisedSequence { x_t, t, eps })
}

/// Applies the one-step kernel `q(x_s | x_{s-1})` for `s = 1..=t`.
pub fn iterate_forward(
    x0: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<NoisedSequence> {
    sched.check_t(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let e = normal_sample(rng, x0.shape(), 0.0, 1.0)?;
        let (a, b) = (sched.alpha(s).sqrt(), sched.beta(s).sqrt());
        x = x.zip_map(&e, |x, e| a * x + b * e)?;
    }
    let (a, b) = (
        sched.alpha_bar(t).sqrt(),
        sched.one_minus_alpha_bar(t).sqrt(),
    );
    let eps = x.zip_map(x0, |xt, x0| (xt - a * x0) / b)?;
    Ok(NoisedSequence { x_t: x, t, eps })
}

/// Posterior mean and variance of `x_s` given `x_t` and a clean estimate, `s < t`.
fn posterior(
    sched: &DiffusionSchedule,
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    s: usize,
) -> Result<(Tensor, f64)> {
    let log_ts = sched.log_alpha_bar(t) - sched.log_alpha_bar(s);
    let a_ts = log_ts.exp();
    let b_ts = if s + 1 == t {
        sched.beta(t)
    } else {
        -log_ts.exp_m1()
    };
    let (denom, rest_s) = (sched.one_minus_alpha_bar(t), sched.one_minus_alpha_bar(s));
    let c0 = sched.alpha_bar(s).sqrt() * b_ts / denom;
    let ct = a_ts.sqrt() * rest_s / denom;
    let mean = x0_hat.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt)?;
    Ok((mean, b_ts * rest_s / denom))
}

/// Mean of `p(x_{t-1} | x_t)` with `x0_hat` plugged into the posterior.
pub fn reverse_step(
    x_t: &NoisedSequence,
    x0_hat: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(x_t.t)?;
    if x0_hat.shape() != x_t.x_t.shape() {
        return arg_err(format!(
            "x0_hat shape {:?} differs from x_t {:?}",
            x0_hat.shape(),
            x_t.x_t.shape()
        ));
    }
    if x_t.t == 1 {
        return Ok(x0_hat.clone());
    }
    Ok(posterior(sched, &x_t.x_t, x0_hat, x_t.t, x_t.t - 1)?.0)
}

/// The `steps` timesteps visited when starting from `t`, descending.
pub fn chain_timesteps(t: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|i| ((i * t) as f64 / steps as f64).round().max(1.0) as usize)
        .collect()
}

/// Runs the reverse chain from `x_T` with exactly `steps` denoiser calls.
///
/// `steps == x_T.t` visits every step; fewer steps stride through the
/// schedule using the general posterior between visited steps; `steps == 1`
/// returns the first prediction directly. When `noise` is supplied, each
/// intermediate transition adds posterior-variance Gaussian noise.
pub fn run_reverse_chain<F>(
    x_big_t: &NoisedSequence,
    mut denoiser: F,
    sched: &DiffusionSchedule,
    steps: usize,
    mut noise: Option<&mut Rng>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    sched.check_t(x_big_t.t)?;
    if steps < 1 || steps > x_big_t.t {
        return arg_err(format!("steps {steps} outside 1..={}", x_big_t.t));
    }
    let ts = chain_timesteps(x_big_t.t, steps);
    let mut x = x_big_t.x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let x0_hat = denoiser(&x, t)?;
        if x0_hat.shape() != x.shape() {
            return arg_err("denoiser changed the sequence shape");
        }
        let Some(&s) = ts.get(i + 1) else {
            return Ok(x0_hat);
        };
        let (mean, var) = posterior(sched, &x, &x0_hat, t, s)?;
        x = match noise.as_deref_mut() {
            Some(rng) => {
                let e = normal_sample(rng, mean.shape(), 0.0, 1.0)?;
                let sd = var.sqrt();
                mean.zip_map(&e, |m, e| m + sd * e)?
            }
            None => mean,
        };
    }
    unreachable!("chain has at least one step")
}

#[cfg(test)]
#[path = "diffusion_tests.rs"]
mod tests;
