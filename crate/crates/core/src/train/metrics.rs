//! Distortion measures, shared by the training loss and evaluation.
//!
//! Pixel values are in `[0, 1]`; MSE is reported on the 255 scale.

use crate::error::TensorError;
use crate::tensor::{Element, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, TensorError>;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean squared error of 255-scaled pixels, on the tape.
pub fn mse_255<F: Element>(tape: &Tape<F>, x: &Var<F>, x_hat: &Var<F>) -> Result<Var<F>> {
    let d = tape.sub(x_hat, x)?;
    tape.mul_scalar(&tape.mean_all(&tape.square(&d)?)?, 255.0 * 255.0)
}

pub fn mse<F: Element>(x: &Tensor<F>, x_hat: &Tensor<F>) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(mse_255(&tape, &Var::constant(x.clone()), &Var::constant(x_hat.clone()))?.value().data()[0].f64())
}

/// `10·log10(255² / mse_255)`, capped.
pub fn psnr_from_mse(mse_255: f64) -> f64 {
    if mse_255 <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0f64 * 255.0 / mse_255).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<F: Element>(x: &Tensor<F>, x_hat: &Tensor<F>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

/// `−10·log10(1 − d)`.
pub fn ms_ssim_db(d: f64) -> f64 {
    if d >= 1.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * (1.0 - d).log10()).min(PSNR_CAP_DB)
}

/// Normalized Gaussian taps; the window shrinks to `side` on small inputs.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..len).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Mean contrast-structure and mean SSIM at one scale.
fn ssim_terms<F: Element>(tape: &Tape<F>, x: &Var<F>, y: &Var<F>) -> Result<(Var<F>, Var<F>)> {
    let [_, _, h, w] = x.shape();
    let taps = gaussian_taps(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let f = |v: &Var<F>| tape.sep_filter_valid(v, &taps);
    let (mx, my) = (f(x)?, f(y)?);
    let (mx2, my2, mxy) = (tape.square(&mx)?, tape.square(&my)?, tape.mul(&mx, &my)?);
    let sxx = tape.sub(&f(&tape.square(x)?)?, &mx2)?;
    let syy = tape.sub(&f(&tape.square(y)?)?, &my2)?;
    let sxy = tape.sub(&f(&tape.mul(x, y)?)?, &mxy)?;
    let cs = tape.div(
        &tape.add_scalar(&tape.mul_scalar(&sxy, 2.0)?, C2)?,
        &tape.add_scalar(&tape.add(&sxx, &syy)?, C2)?,
    )?;
    let l = tape.div(
        &tape.add_scalar(&tape.mul_scalar(&mxy, 2.0)?, C1)?,
        &tape.add_scalar(&tape.add(&mx2, &my2)?, C1)?,
    )?;
    let ssim = tape.mean_all(&tape.mul(&l, &cs)?)?;
    Ok((tape.mean_all(&cs)?, ssim))
}

/// Five-scale MS-SSIM averaged over channels at each scale. Negative
/// per-scale terms clamp to zero.
pub fn ms_ssim_var<F: Element>(tape: &Tape<F>, x: &Var<F>, y: &Var<F>) -> Result<Var<F>> {
    if x.shape() != y.shape() {
        return Err(TensorError::Shape {
            op: "ms_ssim",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut out: Option<Var<F>> = None;
    for (s, &wgt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (cs, ssim) = ssim_terms(tape, &x, &y)?;
        let last = s + 1 == MS_SSIM_WEIGHTS.len();
        let term = tape.pos_pow(if last { &ssim } else { &cs }, wgt)?;
        out = Some(match out {
            Some(o) => tape.mul(&o, &term)?,
            None => term,
        });
        if !last {
            let [_, _, h, w] = x.shape();
            let (eh, ew) = (h - h % 2, w - w % 2);
            if eh < 2 || ew < 2 {
                return Err(TensorError::Shape {
                    op: "ms_ssim",
                    detail: format!("image too small for five scales at {h}x{w}"),
                });
            }
            x = tape.downsample(&tape.crop(&x, eh, ew)?, 2)?;
            y = tape.downsample(&tape.crop(&y, eh, ew)?, 2)?;
        }
    }
    Ok(out.expect("five scales"))
}

pub fn ms_ssim<F: Element>(x: &Tensor<F>, y: &Tensor<F>) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(ms_ssim_var(&tape, &Var::constant(x.clone()), &Var::constant(y.clone()))?.value().data()[0].f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(1.0) - 48.130_803_608_679_1).abs() < 1e-9);
        assert_eq!(psnr_from_mse(0.0), 100.0);
        let x = Tensor::<f64>::full([1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = x.map(|v| v + 1.0 / 255.0);
        assert!((mse(&x, &y).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_identity_and_degradation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let noise = Tensor::<f64>::uniform([1, 3, 64, 64], -0.1, 0.1, &mut rng);
        let mild = crate::tensor::kernels::ew(&x, &noise, crate::tensor::kernels::EwKind::Add).unwrap();
        let strong = x.map(|v| 1.0 - v);
        let a = ms_ssim(&x, &mild).unwrap();
        let b = ms_ssim(&x, &strong).unwrap();
        assert!(a < 1.0 && b < a, "{a} {b}");
        assert!((ms_ssim_db(0.9) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert!((t[i] - t[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform([1, 1, 32, 32], 0.2, 0.8, &mut rng);
        let y = Tensor::<f64>::uniform([1, 1, 32, 32], 0.2, 0.8, &mut rng);
        let xc = x.clone();
        let err = finite_diff_check(
            move |t, v| ms_ssim_var(t, &Var::constant(xc.clone()), &v[0]),
            &[y],
            FdOptions {
                max_coords: Some(40),
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
