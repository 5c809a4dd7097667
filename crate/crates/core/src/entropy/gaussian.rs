//! Conditional Gaussian coding of the main latent.
//!
//! Scales are snapped in the log domain to a fixed table of 64 geometric
//! steps in `[0.11, 256]`. Entry `k` codes residuals in `[-R_k, R_k]` with
//! `R_k = ceil(4·s_k) + 2`; anything further out takes an escape symbol and
//! a raw 32-bit value.

use std::sync::OnceLock;

use super::range_coder::{Cdf, RangeDecoder, RangeEncoder};
use crate::error::EntropyError;
use crate::tensor::kernels::gaussian_interval_scalar;

pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;
pub const TABLE_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub scales: Vec<f64>,
    pub radii: Vec<i64>,
    pub cdfs: Vec<Cdf>,
}

impl GaussianConditional {
    fn build() -> Self {
        let (l0, l1) = (SCALE_MIN.ln(), SCALE_MAX.ln());
        let mut scales: Vec<f64> = (0..TABLE_SIZE)
            .map(|k| (l0 + (l1 - l0) * k as f64 / (TABLE_SIZE - 1) as f64).exp())
            .collect();
        scales[0] = SCALE_MIN;
        scales[TABLE_SIZE - 1] = SCALE_MAX;
        let radii: Vec<i64> = scales.iter().map(|s| (4.0 * s).ceil() as i64 + 2).collect();
        let cdfs = scales
            .iter()
            .zip(&radii)
            .map(|(&s, &r)| {
                let mut pmf: Vec<f64> = (-r..=r).map(|v| gaussian_interval_scalar(v as f64, 0.0, s)).collect();
                let inside: f64 = pmf.iter().sum();
                pmf.push((1.0 - inside).max(0.0));
                Cdf::from_pmf(&pmf).expect("table fits 16-bit precision")
            })
            .collect();
        Self { scales, radii, cdfs }
    }

    /// Shared, lazily built table.
    pub fn standard() -> &'static Self {
        static TABLE: OnceLock<GaussianConditional> = OnceLock::new();
        TABLE.get_or_init(Self::build)
    }

    /// Nearest table entry to `sigma` in the log domain.
    pub fn index(&self, sigma: f64) -> Result<usize, EntropyError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(EntropyError::NonPositiveScale(sigma));
        }
        let (l0, l1) = (SCALE_MIN.ln(), SCALE_MAX.ln());
        let pos = (sigma.ln() - l0) / (l1 - l0) * (TABLE_SIZE - 1) as f64;
        Ok(pos.round().clamp(0.0, (TABLE_SIZE - 1) as f64) as usize)
    }

    /// Codes one integer residual under table entry `k`.
    pub fn encode(&self, enc: &mut RangeEncoder, k: usize, residual: i64) -> Result<(), EntropyError> {
        let r = self.radii[k];
        if residual.abs() <= r {
            enc.encode((residual + r) as usize, &self.cdfs[k])
        } else {
            enc.encode((2 * r + 1) as usize, &self.cdfs[k])?;
            enc.encode_raw32(residual as i32 as u32);
            Ok(())
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>, k: usize) -> Result<i64, EntropyError> {
        let r = self.radii[k];
        let s = dec.decode(&self.cdfs[k])? as i64;
        if s <= 2 * r {
            Ok(s - r)
        } else {
            let v = dec.decode_raw32()? as i32 as i64;
            if v.abs() <= r {
                // an escaped value must lie outside the window
                return Err(EntropyError::Corrupt);
            }
            Ok(v)
        }
    }

    /// Coded cost in bits of one residual, escape included.
    pub fn cost_bits(&self, k: usize, residual: i64) -> f64 {
        let r = self.radii[k];
        if residual.abs() <= r {
            -self.cdfs[k].prob((residual + r) as usize).log2()
        } else {
            -self.cdfs[k].prob((2 * r + 1) as usize).log2() + 32.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_shape() {
        let g = GaussianConditional::standard();
        assert_eq!(g.scales.len(), 64);
        assert!((g.scales[0] - 0.11).abs() < 1e-12);
        assert!((g.scales[63] - 256.0).abs() < 1e-9);
        assert_eq!(g.radii[0], 3);
        assert_eq!(g.radii[63], 1026);
        for (c, r) in g.cdfs.iter().zip(&g.radii) {
            assert_eq!(c.len() as i64, 2 * r + 2);
        }
    }

    #[test]
    fn snapping() {
        let g = GaussianConditional::standard();
        assert_eq!(g.index(0.01).unwrap(), 0);
        assert_eq!(g.index(1e6).unwrap(), 63);
        for k in [0usize, 17, 40, 63] {
            assert_eq!(g.index(g.scales[k]).unwrap(), k);
        }
        assert!(g.index(0.0).is_err());
        assert!(g.index(f64::NAN).is_err());
    }

    #[test]
    fn residuals_round_trip_with_escapes() {
        let g = GaussianConditional::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<(usize, i64)> = (0..3000)
            .map(|i| {
                let k = rng.random_range(0..64);
                let r = g.radii[k];
                let v = if i % 50 == 0 { rng.random_range(-100_000..100_000) } else { rng.random_range(-r..=r) };
                (k, v)
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &(k, v) in &items {
            g.encode(&mut enc, k, v).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(k, v) in &items {
            assert_eq!(g.decode(&mut dec, k).unwrap(), v);
        }
        dec.finish().unwrap();
    }
}
