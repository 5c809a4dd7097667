//! Quantization, likelihood models, rate estimation, range coding and the
//! bitstream container.

pub mod bitstream;
pub mod codec;
pub mod gaussian;
pub mod prior;
pub mod range_coder;

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Element, Tape, Tensor, Var};

pub use gaussian::GaussianConditional;
pub use prior::FactorizedPrior;

/// Likelihood floor; caps one element's cost at `-log2(1e-9)` bits.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Additive `U(-½, ½)` noise.
    Noise,
    /// Hard rounding around the offset; not differentiable.
    Round,
    /// Rounded forward value, identity gradient.
    Ste,
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `offset + round(x − offset)` elementwise; `offset` defaults to zero.
pub fn quantize_round<F: Element>(x: &Tensor<F>, offset: Option<&Tensor<F>>) -> Result<Tensor<F>, TensorError> {
    match offset {
        None => Ok(x.map(|v| v.round())),
        Some(o) => {
            if o.shape() != x.shape() {
                return Err(TensorError::shape("quantize", format!("{:?} vs {:?}", x.shape(), o.shape())));
            }
            let data = x.data().iter().zip(o.data()).map(|(&v, &m)| m + (v - m).round()).collect();
            Tensor::from_vec(x.shape(), data)
        }
    }
}

pub fn uniform_noise<F: Element, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<F> {
    Tensor::uniform(shape, -0.5, 0.5, rng)
}

/// Quantization proxy on the tape.
pub fn quantize<F: Element, R: Rng + ?Sized>(
    tape: &Tape<F>,
    x: &Var<F>,
    mode: QuantMode,
    offset: Option<&Var<F>>,
    rng: &mut R,
) -> Result<Var<F>, TensorError> {
    match mode {
        QuantMode::Noise => tape.add(x, &Var::constant(uniform_noise(x.shape(), rng))),
        QuantMode::Round => Ok(Var::constant(quantize_round(x.value(), offset.map(Var::value))?)),
        QuantMode::Ste => {
            let q = quantize_round(x.value(), offset.map(Var::value))?;
            let delta = crate::tensor::kernels::ew(&q, x.value(), crate::tensor::kernels::EwKind::Sub)?;
            tape.add(x, &Var::constant(delta))
        }
    }
}

/// `Σ −log2 p` over every tensor, divided by the pixel count.
pub fn rate_bits<F: Element>(likelihoods: &[&Tensor<F>], pixels: usize) -> f64 {
    let bits: f64 = likelihoods
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|p| -p.f64().max(LIKELIHOOD_FLOOR).ln() / LN_2)
        .sum();
    bits / pixels as f64
}

/// Differentiable bits-per-pixel of a set of likelihood tensors.
pub fn rate_term<F: Element>(tape: &Tape<F>, likelihoods: &[&Var<F>], pixels: usize) -> Result<Var<F>, TensorError> {
    let mut total: Option<Var<F>> = None;
    for l in likelihoods {
        let s = tape.sum_all(&tape.ln(l)?)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| TensorError::shape("rate", "no likelihoods"))?;
    tape.mul_scalar(&total, -1.0 / (LN_2 * pixels as f64))
}
