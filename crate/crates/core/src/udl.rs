//! The user-aware denoising layer: softmax-free, length-normalised attention
//! modulated elementwise by a user/context gate, wrapped in post-norm
//! transformer plumbing.

use crate::encoder::Linear;
use crate::error::{arg_err, Result};
use crate::numerics::{normal_sample, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `sigmoid(gate_pre)` from user/context features, shared by all positions.
    #[default]
    Profile,
    /// `sigmoid(X W_U)` per position.
    Learnt,
    /// All-ones gate.
    None,
}

impl GateMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "profile" => Ok(Self::Profile),
            "learnt" => Ok(Self::Learnt),
            "none" => Ok(Self::None),
            other => arg_err(format!("unknown gate mode '{other}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Profile => "profile",
            Self::Learnt => "learnt",
            Self::None => "none",
        }
    }
}

/// Attention projections shared by self- and cross-attention layers.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub d_model: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Present only for the learnt gate.
    pub wu: Option<ParamId>,
}

impl AttnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        gate_mode: GateMode,
    ) -> Result<Self> {
        if d_model == 0 || heads == 0 || d_model % heads != 0 {
            return arg_err(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            ));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let square = |store: &mut ParamStore, rng: &mut Rng, key: &str| {
            store.add(
                &format!("{name}.{key}"),
                normal_sample(rng, &[d_model, d_model], 0.0, std)?,
            )
        };
        let wq = square(store, rng, "wq")?;
        let wk = square(store, rng, "wk")?;
        let wv = square(store, rng, "wv")?;
        let wo = square(store, rng, "wo")?;
        let wu = match gate_mode {
            GateMode::Learnt => Some(square(store, rng, "wu")?),
            _ => None,
        };
        Ok(Self {
            d_model,
            heads,
            wq,
            wk,
            wv,
            wo,
            wu,
        })
    }
}

#[derive(Debug, Clone)]
pub struct UdlParams {
    pub gate_mode: GateMode,
    pub attn: AttnParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

impl UdlParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        gate_mode: GateMode,
    ) -> Result<Self> {
        let attn = AttnParams::new(store, rng, name, d_model, heads, gate_mode)?;
        let ffn_in = Linear::new(
            store,
            rng,
            &format!("{name}.ffn_in"),
            d_model,
            4 * d_model,
            true,
        )?;
        let ffn_out = Linear::new(
            store,
            rng,
            &format!("{name}.ffn_out"),
            4 * d_model,
            d_model,
            true,
        )?;
        let norm = |store: &mut ParamStore, key: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(&format!("{name}.{key}.gamma"), Tensor::ones(&[d_model]))?,
                store.add(&format!("{name}.{key}.beta"), Tensor::zeros(&[d_model]))?,
            ))
        };
        let ln1 = norm(store, "ln1")?;
        let ln2 = norm(store, "ln2")?;
        Ok(Self {
            gate_mode,
            attn,
            ffn_in,
            ffn_out,
            ln1,
            ln2,
        })
    }
}

/// Builds the gate `U` as a tensor broadcastable against `[B, n, d]`.
///
/// `gate_pre` is `[B, d]`; `x` is the `[B, n, d]` layer input.
pub fn make_gate(
    g: &mut Graph,
    mode: GateMode,
    gate_pre: Option<Var>,
    x: Option<Var>,
    p: &AttnParams,
) -> Result<Var> {
    match mode {
        GateMode::Profile => {
            let Some(pre) = gate_pre else {
                return arg_err("profile gate needs gate features");
            };
            let s = g.shape(pre).to_vec();
            if s.len() != 2 || s[1] != p.d_model {
                return arg_err(format!(
                    "gate features must be [B, {}], got {s:?}",
                    p.d_model
                ));
            }
            let u = g.sigmoid(pre);
            g.reshape(u, &[s[0], 1, s[1]])
        }
        GateMode::Learnt => {
            let (Some(x), Some(wu)) = (x, p.wu) else {
                return arg_err("learnt gate needs the layer input and W_U");
            };
            let w = g.param(wu);
            let z = g.matmul(x, w)?;
            Ok(g.sigmoid(z))
        }
        GateMode::None => Ok(g.constant(Tensor::ones(&[1, p.d_model]))),
    }
}

/// The bare attention core `((Q K^T / n) V) ⊙ U`, with queries from `xq`
/// (`[B, m, d]`) and keys/values from `xkv` (`[B, n, d]`).
pub fn attention_core(g: &mut Graph, xq: Var, xkv: Var, gate: Var, p: &AttnParams) -> Result<Var> {
    let shape = g.shape(xkv).to_vec();
    if shape.len() != 3 || shape[2] != p.d_model || shape[1] == 0 {
        return arg_err(format!(
            "attention input must be [B, n>=1, {}], got {shape:?}",
            p.d_model
        ));
    }
    g.value(xq).ensure_finite("attention query input")?;
    g.value(xkv).ensure_finite("attention input")?;
    let n = shape[1];
    let (wq, wk, wv) = (g.param(p.wq), g.param(p.wk), g.param(p.wv));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let dh = p.d_model / p.heads;
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow(q, 2, h * dh, dh)?,
                g.narrow(k, 2, h * dh, dh)?,
                g.narrow(v, 2, h * dh, dh)?,
            )
        };
        let a = g.matmul_t(qh, kh)?;
        let a = g.scale(a, 1.0 / n as f64);
        outs.push(g.matmul(a, vh)?);
    }
    let hcat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 2)?
    };
    g.mul(hcat, gate)
}

/// Full layer: core, output projection, residual + norm, SiLU feed-forward,
/// residual + norm.
pub fn udl_forward(g: &mut Graph, x: Var, gate: Var, p: &UdlParams) -> Result<Var> {
    let h = attention_core(g, x, x, gate, &p.attn)?;
    let wo = g.param(p.attn.wo);
    let o = g.matmul(h, wo)?;
    let r = g.add(x, o)?;
    let (g1, b1) = (g.param(p.ln1.0), g.param(p.ln1.1));
    let x1 = g.layer_norm(r, g1, b1)?;
    let f = p.ffn_in.forward(g, x1)?;
    let f = g.silu(f);
    let f = p.ffn_out.forward(g, f)?;
    let r2 = g.add(x1, f)?;
    let (g2, b2) = (g.param(p.ln2.0), g.param(p.ln2.1));
    g.layer_norm(r2, g2, b2)
}

#[cfg(test)]
#[path = "udl_tests.rs"]
mod tests;
