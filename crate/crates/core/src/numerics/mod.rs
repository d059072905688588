//! Dense tensors, reverse-mode differentiation, seeded randomness, Adam and
//! a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod rng;
mod tensor;

pub use adam::{adam_step, Adam};
pub use gradcheck::{finite_diff_check, FdReport, MAX_COORDS_PER_PARAM};
pub use graph::{Graph, Var};
pub use params::{GradBuf, Gradients, ParamId, ParamStore};
pub use rng::{normal_sample, Rng};
pub use tensor::Tensor;

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Fixed sinusoidal features of a scalar position: pairs
/// `(sin(x / base^(2i/d)), cos(x / base^(2i/d)))`.
pub fn sinusoidal(x: f64, d: usize, base: f64) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d.div_ceil(2) {
        let freq = base.powf(-(2.0 * i as f64) / d as f64);
        let angle = x * freq;
        out[2 * i] = angle.sin();
        if 2 * i + 1 < d {
            out[2 * i + 1] = angle.cos();
        }
    }
    out
}
