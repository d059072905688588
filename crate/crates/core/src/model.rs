//! The denoiser `f(x_t, t, q) -> (S, D)`: a stack of gated attention layers
//! with step embedding, query conditioning, disentanglement heads and a
//! target-item scoring head.

use crate::encoder::{BehaviorToken, Encoder, EncoderConfig, Mlp};
use crate::error::{arg_err, Result};
use crate::numerics::{
    normal_sample, sigmoid, sinusoidal, Graph, ParamId, ParamStore, Rng, Tensor, Var,
};
use crate::udl::{attention_core, make_gate, udl_forward, AttnParams, GateMode, UdlParams};
use serde::{Deserialize, Serialize};

const STEP_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Query embedding added to every position after layer `inject_after`.
    #[default]
    Additive,
    /// Query embedding prepended as an extra token.
    Concat,
    /// Final layer is cross-attention with the query as the attention query.
    Cross,
    /// Query ignored.
    None,
}

impl Conditioning {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "additive" => Ok(Self::Additive),
            "concat" => Ok(Self::Concat),
            "cross" => Ok(Self::Cross),
            "none" => Ok(Self::None),
            other => arg_err(format!("unknown conditioning '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Additive => "additive",
            Self::Concat => "concat",
            Self::Cross => "cross",
            Self::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    /// `sigmoid(<mean D, I_target> / sqrt(d))`
    #[default]
    Dot,
    /// `sigmoid(MLP([mean D, I_target]))`
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub conditioning: Conditioning,
    /// Defaults to `layers / 2`.
    pub inject_after: Option<usize>,
    pub gate: GateMode,
    pub head: HeadType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 1,
            conditioning: Conditioning::Additive,
            inject_after: None,
            gate: GateMode::Profile,
            head: HeadType::Dot,
        }
    }
}

impl ModelConfig {
    pub fn inject_after(&self) -> usize {
        self.inject_after.unwrap_or(self.layers / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.heads < 1 {
            return arg_err("model needs at least one layer and one head");
        }
        if self.conditioning == Conditioning::Additive {
            let k = self.inject_after();
            if self.layers < 2 || k < 1 || k >= self.layers {
                return arg_err(format!(
                    "additive conditioning needs layers >= 2 and 1 <= inject_after < layers, got {} and {k}",
                    self.layers
                ));
            }
        }
        Ok(())
    }
}

/// Static and dynamic components of one denoised sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledOutput {
    pub s: Tensor,
    pub d: Tensor,
    pub x0_hat: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ctr,
    Cvr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub y_hat: f64,
    pub task: Task,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub layers: Vec<UdlParams>,
    pub cross: Option<AttnParams>,
    pub ws: ParamId,
    pub wd: ParamId,
    pub score_mlp: Option<Mlp>,
}

/// Sinusoidal code of the diffusion step.
pub fn step_embedding(t: usize, d: usize) -> Vec<f64> {
    sinusoidal(t as f64, d, STEP_BASE)
}

/// `||d_t||_2` for every row of `D`.
pub fn inspect_interest(d: &Tensor) -> Vec<f64> {
    d.rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        enc: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(enc, store, rng)?;
        let d = enc.d_model;
        let self_layers = if cfg.conditioning == Conditioning::Cross {
            cfg.layers - 1
        } else {
            cfg.layers
        };
        let layers = (0..self_layers)
            .map(|l| UdlParams::new(store, rng, &format!("udl{l}"), d, cfg.heads, cfg.gate))
            .collect::<Result<Vec<_>>>()?;
        let cross = match cfg.conditioning {
            Conditioning::Cross => Some(AttnParams::new(
                store, rng, "cross", d, cfg.heads, cfg.gate,
            )?),
            _ => None,
        };
        let std = 1.0 / (d as f64).sqrt();
        let ws = store.add("head.ws", normal_sample(rng, &[d, d], 0.0, std)?)?;
        let wd = store.add("head.wd", normal_sample(rng, &[d, d], 0.0, std)?)?;
        let score_mlp = match cfg.head {
            HeadType::Mlp => Some(Mlp::new(store, rng, "score", 2 * d, 2 * d, 1)?),
            HeadType::Dot => None,
        };
        Ok(Self {
            cfg,
            encoder,
            layers,
            cross,
            ws,
            wd,
            score_mlp,
        })
    }

    pub fn d_model(&self) -> usize {
        self.encoder.cfg.d_model
    }

    fn gate_for(
        &self,
        g: &mut Graph,
        gate_pre: Option<Var>,
        x: Var,
        p: &AttnParams,
    ) -> Result<Var> {
        make_gate(g, self.cfg.gate, gate_pre, Some(x), p)
    }

    /// Batched denoiser. `x_t` is `[B, n, d]`, `t` holds one step per row,
    /// `query` and `gate_pre` are `[B, d]`. Returns `(S, D)`, each `[B, n, d]`.
    pub fn denoise(
        &self,
        g: &mut Graph,
        x_t: Var,
        t: &[usize],
        query: Option<Var>,
        gate_pre: Option<Var>,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x_t).to_vec();
        let d = self.d_model();
        if shape.len() != 3 || shape[2] != d || shape[1] == 0 {
            return arg_err(format!(
                "denoise input must be [B, n>=1, {d}], got {shape:?}"
            ));
        }
        let (b, n) = (shape[0], shape[1]);
        if t.len() != b {
            return arg_err(format!("{} step indices for batch of {b}", t.len()));
        }
        let q3 = match (self.cfg.conditioning, query) {
            (Conditioning::None, _) => None,
            (_, Some(q)) => {
                if g.shape(q) != [b, d] {
                    return arg_err(format!("query must be [{b}, {d}]"));
                }
                Some(g.reshape(q, &[b, 1, d])?)
            }
            (c, None) => return arg_err(format!("{} conditioning needs a query", c.name())),
        };
        let steps: Vec<f64> = t.iter().flat_map(|&s| step_embedding(s, d)).collect();
        let steps = g.constant(Tensor::new(vec![b, 1, d], steps)?);
        let mut h = g.add(x_t, steps)?;
        if let (Conditioning::Concat, Some(q)) = (self.cfg.conditioning, q3) {
            h = g.concat(&[q, h], 1)?;
        }
        let inject = self.cfg.inject_after();
        for (l, layer) in self.layers.iter().enumerate() {
            let u = self.gate_for(g, gate_pre, h, &layer.attn)?;
            h = udl_forward(g, h, u, layer)?;
            if let (Conditioning::Additive, Some(q)) = (self.cfg.conditioning, q3) {
                if l + 1 == inject {
                    h = g.add(h, q)?;
                }
            }
        }
        if let (Some(cross), Some(q)) = (&self.cross, q3) {
            let u = self.gate_for(g, gate_pre, q, cross)?;
            let c = attention_core(g, q, h, u, cross)?;
            let wo = g.param(cross.wo);
            let c = g.matmul(c, wo)?;
            h = g.add(h, c)?;
        }
        if self.cfg.conditioning == Conditioning::Concat {
            h = g.narrow(h, 1, 1, n)?;
        }
        let (ws, wd) = (g.param(self.ws), g.param(self.wd));
        let s = g.matmul(h, ws)?;
        let dd = g.matmul(h, wd)?;
        Ok((s, dd))
    }

    /// Logits for `targets` (`[C, d]` item encodings); candidate `c` is scored
    /// against the dynamic interest of batch row `owner[c]`.
    pub fn score_logits(
        &self,
        g: &mut Graph,
        d: Var,
        targets: Var,
        owner: &[usize],
    ) -> Result<Var> {
        let dm = self.d_model();
        let mean = g.mean_axis(d, 1)?;
        let mean = g.index_select(mean, owner)?;
        if g.shape(targets) != [owner.len(), dm] {
            return arg_err(format!("targets must be [{}, {dm}]", owner.len()));
        }
        match &self.score_mlp {
            None => {
                let prod = g.mul(mean, targets)?;
                let dot = g.sum_axis(prod, 1)?;
                Ok(g.scale(dot, 1.0 / (dm as f64).sqrt()))
            }
            Some(mlp) => {
                let x = g.concat(&[mean, targets], 1)?;
                let z = mlp.forward(g, x)?;
                g.reshape(z, &[owner.len()])
            }
        }
    }

    /// Single-sequence denoiser on plain tensors.
    pub fn denoise_one(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        query_emb: Option<&[f64]>,
        gate_pre: Option<&[f64]>,
    ) -> Result<DisentangledOutput> {
        let d = self.d_model();
        let n = x_t.shape()[0];
        let mut g = Graph::new(store);
        let x = g.constant(x_t.clone().reshape(&[1, n, d])?);
        let q = query_emb
            .map(|q| Tensor::new(vec![1, d], q.to_vec()).map(|t| g.constant(t)))
            .transpose()?;
        let u = gate_pre
            .map(|u| Tensor::new(vec![1, d], u.to_vec()).map(|t| g.constant(t)))
            .transpose()?;
        let (s, dd) = self.denoise(&mut g, x, &[t], q, u)?;
        let s = g.value(s).clone().reshape(&[n, d])?;
        let dd = g.value(dd).clone().reshape(&[n, d])?;
        let x0_hat = s.zip_map(&dd, |a, b| a + b)?;
        x0_hat.ensure_finite("denoised sequence")?;
        Ok(DisentangledOutput { s, d: dd, x0_hat })
    }

    /// Scores one target against a single `[n, d]` dynamic-interest matrix.
    pub fn score(
        &self,
        store: &ParamStore,
        d: &Tensor,
        target: &BehaviorToken,
        task: Task,
    ) -> Result<Prediction> {
        let dm = self.d_model();
        let n = d.shape()[0];
        let mut g = Graph::new(store);
        let dv = g.constant(d.clone().reshape(&[1, n, dm])?);
        let tv = self.encoder.encode_items(&mut g, &[target])?;
        let z = self.score_logits(&mut g, dv, tv, &[0])?;
        let logit = g.value(z).data()[0];
        Ok(Prediction {
            logit,
            y_hat: sigmoid(logit),
            task,
        })
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
