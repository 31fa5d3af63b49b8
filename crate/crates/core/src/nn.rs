//! Layer building blocks shared by the slide aggregator and the omics encoders.

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::{Real, Tensor};

/// `x W + b` with `W` stored `[in x out]`.
pub fn linear<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    x: Var,
    weight: &str,
    bias: Option<&str>,
) -> Result<Var> {
    let w = tape.param(params, weight)?;
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => {
            let b = tape.param(params, b)?;
            tape.add_row(y, b)
        }
        None => Ok(y),
    }
}

/// Gated feed-forward `W_down(silu(u W_gate) * (u W_up))` reading
/// `{prefix}_w_gate`, `{prefix}_w_up`, `{prefix}_w_down`.
pub fn swiglu<'a, T: Real>(tape: &mut Tape<'a, T>, params: &'a ParamSet<T>, prefix: &str, u: Var) -> Result<Var> {
    let gate = linear(tape, params, u, &format!("{prefix}_w_gate"), None)?;
    let up = linear(tape, params, u, &format!("{prefix}_w_up"), None)?;
    let act = tape.silu(gate)?;
    let mixed = tape.mul(act, up)?;
    linear(tape, params, mixed, &format!("{prefix}_w_down"), None)
}

/// Pre-norm residual SwiGLU block: `x + swiglu(rms_norm(x))`.
pub fn swiglu_residual<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = tape.param(params, &format!("{prefix}_norm"))?;
    let u = tape.rms_norm(x, gain)?;
    let f = swiglu(tape, params, prefix, u)?;
    tape.add(x, f)
}

pub(crate) fn normal_tensor(rng: &mut Stream, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Inserts `{prefix}_norm`, `{prefix}_w_gate`, `{prefix}_w_up` and a zeroed
/// `{prefix}_w_down`, so a fresh block is an exact identity map.
pub(crate) fn init_swiglu(params: &mut ParamSet<f32>, rng: &mut Stream, prefix: &str, dim: usize, hidden: usize) {
    params.insert(format!("{prefix}_norm"), Tensor::full(&[dim], 1.0));
    let std_in = 1.0 / (dim as f64).sqrt();
    params.insert(format!("{prefix}_w_gate"), normal_tensor(rng, &[dim, hidden], std_in));
    params.insert(format!("{prefix}_w_up"), normal_tensor(rng, &[dim, hidden], std_in));
    params.insert(format!("{prefix}_w_down"), Tensor::zeros(&[hidden, dim]));
}
