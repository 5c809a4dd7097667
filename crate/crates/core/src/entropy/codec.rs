//! Image ↔ bitstream.
//!
//! `ẑ = round(z)` is coded per channel under the learned prior's table,
//! then `ŷ = μ + round(y − μ)` is coded as integer residuals under the
//! snapped Gaussian scale of each element. Both sides derive `μ, σ` from
//! the same `ẑ` with the same code, so the latents agree exactly.

use super::bitstream::Bitstream;
use super::gaussian::GaussianConditional;
use super::prior::ZTable;
use super::range_coder::{RangeDecoder, RangeEncoder};
use super::{quantize_round, rate_bits, LIKELIHOOD_FLOOR};
use crate::error::{BitstreamError, EntropyError, Error, TensorError};
use crate::net::Model;
use crate::tensor::kernels::{crop, gaussian_interval, pad_replicate};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Encoded<F: Element> {
    pub stream: Bitstream,
    pub y_hat: Tensor<F>,
    pub z_hat: Tensor<F>,
    /// `Σ −log2 p` of the committed latents under the exact (unsnapped)
    /// likelihoods.
    pub estimated_bits: f64,
}

#[derive(Debug, Clone)]
pub struct Decoded<F: Element> {
    /// Cropped to the true size and clamped to `[0, 1]`.
    pub x_hat: Tensor<F>,
    pub y_hat: Tensor<F>,
    pub z_hat: Tensor<F>,
}

fn z_tables<F: Element>(model: &Model<F>) -> Result<Vec<ZTable>, EntropyError> {
    let prior = &model.layout.prior;
    (0..prior.channels).map(|c| prior.coding_table(&model.params, c)).collect()
}

/// Scale-table entry of every `σ`.
fn scale_indices<F: Element>(sigma: &Tensor<F>) -> Result<Vec<usize>, EntropyError> {
    let g = GaussianConditional::standard();
    sigma.data().iter().map(|s| g.index(s.f64())).collect()
}

fn padded_size(h: usize, w: usize, m: usize) -> (usize, usize) {
    (h.div_ceil(m) * m, w.div_ceil(m) * m)
}

pub fn encode_image<F: Element>(model: &Model<F>, x: &Tensor<F>, lambda_index: u8) -> Result<Encoded<F>, Error> {
    let [b, c, h, w] = x.shape();
    if b != 1 || c != 3 {
        return Err(TensorError::Shape {
            op: "encode_image",
            detail: format!("expected one 3-channel image, got {:?}", x.shape()),
        }
        .into());
    }
    let header_check = Bitstream::new(model.config.fingerprint(), lambda_index, h, w, Vec::new(), Vec::new())?;
    let (ph, pw) = padded_size(h, w, model.config.pad_multiple());
    let xp = pad_replicate(x, ph, pw)?;

    let tape = Tape::no_grad();
    let y = model.analysis(&tape, &Var::constant(xp))?;
    let z = model.hyper_analysis(&tape, &y)?;
    let z_hat = quantize_round(z.value(), None)?;

    let tables = z_tables(model)?;
    let mut enc = RangeEncoder::new();
    let zc = z_hat.channels();
    for ch in 0..zc {
        let t = &tables[ch];
        for &v in z_hat.plane(0, ch) {
            let v = v.f64() as i64;
            if (t.lo..=t.hi).contains(&v) {
                enc.encode((v - t.lo) as usize, &t.cdf)?;
            } else {
                enc.encode(t.escape(), &t.cdf)?;
                enc.encode_raw32(v as i32 as u32);
            }
        }
    }
    let z_bytes = enc.finish();

    let zv = Var::constant(z_hat.clone());
    let (mu, sigma) = model.hyper_synthesis(&tape, &zv)?;
    let (mu, sigma) = (mu.value(), sigma.value());
    let y_hat = quantize_round(y.value(), Some(mu))?;
    let idx = scale_indices(sigma)?;
    let g = GaussianConditional::standard();
    let mut enc = RangeEncoder::new();
    for ((&k, &yh), &m) in idx.iter().zip(y_hat.data()).zip(mu.data()) {
        let r = (yh - m).f64().round() as i64;
        g.encode(&mut enc, k, r)?;
    }
    let y_bytes = enc.finish();

    let y_lik = gaussian_interval(&y_hat, mu, sigma, LIKELIHOOD_FLOOR)?;
    let z_lik = model.layout.prior.likelihood(&tape, &model.params, &zv)?;
    let estimated_bits = rate_bits(&[&y_lik, z_lik.value()], 1);

    let stream = Bitstream {
        z: z_bytes,
        y: y_bytes,
        ..header_check
    };
    Ok(Encoded {
        stream,
        y_hat,
        z_hat,
        estimated_bits,
    })
}

pub fn decode_image<F: Element>(model: &Model<F>, stream: &Bitstream) -> Result<Decoded<F>, Error> {
    let expected = model.config.fingerprint();
    if stream.config_id != expected {
        return Err(BitstreamError::ConfigMismatch {
            stream: stream.config_id,
            model: expected,
        }
        .into());
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    if h == 0 || w == 0 {
        return Err(TensorError::Shape {
            op: "decode_image",
            detail: format!("empty image {h}x{w}"),
        }
        .into());
    }
    let (ph, pw) = padded_size(h, w, model.config.pad_multiple());
    let cfg = &model.config;

    let tables = z_tables(model)?;
    let zshape = [1, cfg.hyper_width, ph / 64, pw / 64];
    let mut z_hat = Tensor::<F>::zeros(zshape);
    let mut dec = RangeDecoder::new(&stream.z)?;
    let plane = zshape[2] * zshape[3];
    for ch in 0..cfg.hyper_width {
        let t = &tables[ch];
        for i in 0..plane {
            let s = dec.decode(&t.cdf)?;
            let v = if s == t.escape() {
                let v = dec.decode_raw32()? as i32 as i64;
                if (t.lo..=t.hi).contains(&v) {
                    return Err(EntropyError::Corrupt.into());
                }
                v
            } else {
                t.lo + s as i64
            };
            z_hat.data_mut()[ch * plane + i] = F::c(v as f64);
        }
    }
    dec.finish()?;

    let tape = Tape::no_grad();
    let (mu, sigma) = model.hyper_synthesis(&tape, &Var::constant(z_hat.clone()))?;
    let (mu, sigma) = (mu.value(), sigma.value());
    let idx = scale_indices(sigma)?;
    let g = GaussianConditional::standard();
    let mut dec = RangeDecoder::new(&stream.y)?;
    let mut residual = Tensor::<F>::zeros(mu.shape());
    for (k, r) in idx.iter().zip(residual.data_mut()) {
        *r = F::c(g.decode(&mut dec, *k)? as f64);
    }
    dec.finish()?;
    let y_hat = Tensor::from_vec(
        mu.shape(),
        mu.data().iter().zip(residual.data()).map(|(&m, &r)| m + r).collect(),
    )?;

    let x = model.synthesis(&tape, &Var::constant(y_hat.clone()))?;
    let x_hat = crop(x.value(), h, w)?.map(|v| v.max(F::zero()).min(F::one()));
    Ok(Decoded { x_hat, y_hat, z_hat })
}
