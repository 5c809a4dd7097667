//! Bjøntegaard delta rate between two rate-distortion curves.
//!
//! Each curve's log-rate is fitted as a function of quality, both fits are
//! integrated over the shared quality interval, and the mean log-rate gap
//! maps to a percentage.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{AnalysisError, Error};

pub const MIN_POINTS: usize = 4;
pub const MIN_OVERLAP_DB: f64 = 1.0;
pub const SAMPLES: usize = 1000;

/// `(bpp, quality_dB)` pairs in strictly increasing bpp.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, AnalysisError> {
        if points.len() < MIN_POINTS {
            return Err(AnalysisError::TooFewPoints(points.len()));
        }
        if points.iter().any(|&(r, _)| !(r > 0.0 && r.is_finite())) || points.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(AnalysisError::NonMonotoneRate);
        }
        if points.iter().any(|&(_, d)| !d.is_finite()) {
            return Err(AnalysisError::NonFiniteQuality);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Parses `bpp,quality_db` lines. Blank lines, `#` comments and a
    /// non-numeric header line are skipped.
    pub fn parse_csv(text: &str, name: &str) -> Result<Self, AnalysisError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match fields.as_slice() {
                [a, b, ..] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some(p) => points.push(p),
                None if points.is_empty() && i == 0 => continue,
                None => return Err(AnalysisError::CurveFormat(name.to_string(), format!("line {}: `{line}`", i + 1))),
            }
        }
        Self::new(points)
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse_csv(&text, &path.display().to_string())?)
    }

    fn quality_range(&self) -> (f64, f64) {
        let q = self.points.iter().map(|p| p.1);
        (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
    }

    /// Points as `(quality, ln rate)`, sorted by quality.
    fn log_rate_by_quality(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.points.iter().map(|&(r, d)| (d, r.ln())).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    /// Least-squares cubic polynomial.
    #[default]
    Cubic,
    /// Monotone piecewise cubic Hermite through the points.
    Pchip,
}

/// A fitted `ln rate(quality)`.
#[derive(Debug, Clone)]
pub enum Fit {
    Cubic {
        /// Coefficients in the normalized variable `(q − center) / scale`.
        coeffs: [f64; 4],
        center: f64,
        scale: f64,
    },
    Pchip {
        knots: Vec<(f64, f64)>,
        slopes: Vec<f64>,
    },
}

impl Fit {
    pub fn cubic(pts: &[(f64, f64)]) -> Self {
        let n = pts.len() as f64;
        let center = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let scale = pts.iter().map(|p| (p.0 - center).abs()).fold(0.0, f64::max).max(1e-12);
        let a = DMatrix::from_fn(pts.len(), 4, |i, j| ((pts[i].0 - center) / scale).powi(j as i32));
        let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
        let sol = a.svd(true, true).solve(&b, 1e-14).expect("svd with both factors");
        Fit::Cubic {
            coeffs: [sol[0], sol[1], sol[2], sol[3]],
            center,
            scale,
        }
    }

    /// Fritsch–Carlson slopes; knots must have distinct qualities.
    pub fn pchip(pts: &[(f64, f64)]) -> Result<Self, AnalysisError> {
        if pts.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(AnalysisError::NonMonotoneQuality);
        }
        let n = pts.len();
        let h: Vec<f64> = pts.windows(2).map(|p| p[1].0 - p[0].0).collect();
        let d: Vec<f64> = pts.windows(2).map(|p| (p[1].1 - p[0].1) / (p[1].0 - p[0].0)).collect();
        let mut m = vec![0.0; n];
        for k in 1..n - 1 {
            if d[k - 1] * d[k] > 0.0 {
                let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
                m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
            }
        }
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
            let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if s.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                s
            }
        };
        m[0] = end(h[0], h[1], d[0], d[1]);
        m[n - 1] = end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        Ok(Fit::Pchip {
            knots: pts.to_vec(),
            slopes: m,
        })
    }

    pub fn eval(&self, q: f64) -> f64 {
        match self {
            Fit::Cubic { coeffs, center, scale } => {
                let t = (q - center) / scale;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            Fit::Pchip { knots, slopes } => {
                let k = knots.partition_point(|p| p.0 <= q).clamp(1, knots.len() - 1) - 1;
                let ((x0, y0), (x1, y1)) = (knots[k], knots[k + 1]);
                let h = x1 - x0;
                let t = (q - x0) / h;
                let (t2, t3) = (t * t, t * t * t);
                (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                    + (t3 - 2.0 * t2 + t) * h * slopes[k]
                    + (-2.0 * t3 + 3.0 * t2) * y1
                    + (t3 - t2) * h * slopes[k + 1]
            }
        }
    }
}

/// Trapezoid rule over `SAMPLES` equally spaced points.
pub fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let step = (hi - lo) / (SAMPLES - 1) as f64;
    let mut sum = 0.5 * (f(lo) + f(hi));
    for i in 1..SAMPLES - 1 {
        sum += f(lo + step * i as f64);
    }
    sum * step
}

/// Shared quality interval of both curves.
pub fn overlap(anchor: &RdCurve, test: &RdCurve) -> Result<(f64, f64), AnalysisError> {
    let (a0, a1) = anchor.quality_range();
    let (t0, t1) = test.quality_range();
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if hi - lo < MIN_OVERLAP_DB {
        return Err(AnalysisError::InsufficientOverlap(hi - lo));
    }
    Ok((lo, hi))
}

pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64, AnalysisError> {
    bd_rate_with(anchor, test, Interp::Cubic)
}

/// Percent rate change of `test` against `anchor` at equal quality;
/// negative means `test` needs fewer bits.
pub fn bd_rate_with(anchor: &RdCurve, test: &RdCurve, interp: Interp) -> Result<f64, AnalysisError> {
    let (lo, hi) = overlap(anchor, test)?;
    let fit = |c: &RdCurve| match interp {
        Interp::Cubic => Ok(Fit::cubic(&c.log_rate_by_quality())),
        Interp::Pchip => Fit::pchip(&c.log_rate_by_quality()),
    };
    let (fa, ft) = (fit(anchor)?, fit(test)?);
    let mean = trapezoid(|q| ft.eval(q) - fa.eval(q), lo, hi) / (hi - lo);
    Ok(100.0 * (mean.exp() - 1.0))
}
