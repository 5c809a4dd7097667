//! Central finite-difference verification of tape gradients.
//!
//! The scalar probed is `Σ w_k · out_k` with fixed pseudo-random weights
//! `w_k ∈ [0.5, 1.5)`, so every output coordinate contributes and no
//! gradient cancels by symmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub h: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_coords: None,
            seed: 0x5eed,
        }
    }
}

/// `|a − n| / (|n| + 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn probe_weights(shape: super::Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Tensor::uniform(shape, 0.5, 1.5, &mut rng)
}

fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn coords(n: usize, opts: &FdOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(salt));
            (0..m).map(|_| rng.random_range(0..n)).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Max relative error between tape gradients and central differences of
/// `f` with respect to every input tensor.
pub fn finite_diff_check<G>(f: G, inputs: &[Tensor<f64>], opts: FdOptions) -> Result<f64>
where
    G: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    let w = probe_weights(out.shape(), opts.seed);
    let loss = tape.mul(&out, &Var::constant(w.clone()))?;
    let loss = tape.sum_all(&loss)?;
    let grads = tape.backward(&loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<_> = xs.iter().map(|x| Var::constant(x.clone())).collect();
        Ok(weighted(f(&t, &vs)?.value(), &w))
    };

    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(leaf.shape());
        let g = grads.wrt(leaf).unwrap_or(&zero);
        for idx in coords(inputs[i].numel(), &opts, i as u64) {
            let mut xs = inputs.to_vec();
            let base = xs[i].data()[idx];
            xs[i].data_mut()[idx] = base + opts.h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[idx] = base - opts.h;
            let fm = eval(&xs)?;
            let numeric = (fp - fm) / (2.0 * opts.h);
            worst = worst.max(rel_err(g.data()[idx], numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to selected parameters of a store.
pub fn finite_diff_check_params<G>(f: G, store: &ParamStore<f64>, ids: &[ParamId], opts: FdOptions) -> Result<f64>
where
    G: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let w = probe_weights(out.shape(), opts.seed);
    let loss = tape.mul(&out, &Var::constant(w.clone()))?;
    let loss = tape.sum_all(&loss)?;
    let grads = tape.backward(&loss)?;

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (salt, &id) in ids.iter().enumerate() {
        let original = (**store.value(id)).clone();
        let zero = Tensor::zeros(original.shape());
        let g = grads.param(id).unwrap_or(&zero);
        for idx in coords(original.numel(), &opts, salt as u64) {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut t = original.clone();
                t.data_mut()[idx] += delta;
                probe.set_value(id, t)?;
                let tape = Tape::no_grad();
                Ok(weighted(f(&tape, &probe)?.value(), &w))
            };
            let fp = eval_at(opts.h)?;
            let fm = eval_at(-opts.h)?;
            let numeric = (fp - fm) / (2.0 * opts.h);
            worst = worst.max(rel_err(g.data()[idx], numeric));
        }
        probe.set_value(id, original)?;
    }
    Ok(worst)
}

/// Finite-difference check of every engine primitive at 64-bit; returns the
/// worst relative error per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::shift::ShiftSpec;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: super::Shape, lo: f64, hi: f64| Tensor::<f64>::uniform(shape, lo, hi, &mut rng);
    // values bounded away from zero, for ops with a kink there
    let away = |t: Tensor<f64>| t.map(|v| v + 0.2 * v.signum());
    let opts = FdOptions {
        seed,
        ..FdOptions::default()
    };
    let s = [2, 8, 4, 6];

    let x = u(s, -1.0, 1.0);
    let x2 = u(s, -1.0, 1.0);
    let pos = u(s, 0.5, 2.0);
    let w = u([6, 8, 1, 1], -1.0, 1.0);
    let wg = u([6, 4, 1, 1], -1.0, 1.0);
    let b = u([1, 6, 1, 1], -1.0, 1.0);
    let dw = u([8, 1, 3, 3], -1.0, 1.0);
    let db = u([1, 8, 1, 1], -1.0, 1.0);
    let v = u([1, 8, 1, 1], -1.0, 1.0);
    let sigma = u(s, 0.5, 2.0);
    let lower = u(s, -2.0, 2.0);
    let width = u(s, 0.3, 1.5);
    let upper = Tensor::from_vec(s, lower.data().iter().zip(width.data()).map(|(a, b)| a + b).collect())?;
    let img = u([1, 2, 9, 8], 0.0, 1.0);
    let kx = away(u(s, -1.0, 1.0));
    let taps = [0.25, 0.5, 0.25];
    let spec = ShiftSpec::default();

    let mut out = Vec::new();
    let mut run = |name: &'static str, r: Result<f64>| -> Result<()> {
        out.push((name, r?));
        Ok(())
    };
    run("conv1x1", finite_diff_check(|t, v| t.conv1x1(&v[0], &v[1], Some(&v[2]), 1), &[x.clone(), w, b.clone()], opts))?;
    run("conv1x1_grouped", finite_diff_check(|t, v| t.conv1x1(&v[0], &v[1], Some(&v[2]), 2), &[x.clone(), wg, b], opts))?;
    run("depthwise_conv3x3", finite_diff_check(|t, v| t.dwconv3x3(&v[0], &v[1], Some(&v[2])), &[x.clone(), dw, db], opts))?;
    run("resample_down", finite_diff_check(|t, v| t.downsample(&v[0], 2), std::slice::from_ref(&x), opts))?;
    run("resample_up", finite_diff_check(|t, v| t.upsample(&v[0], 2), std::slice::from_ref(&x), opts))?;
    run("space_to_channel", finite_diff_check(|t, v| t.space_to_channel(&v[0], 2), std::slice::from_ref(&x), opts))?;
    run("channel_to_space", finite_diff_check(|t, v| t.channel_to_space(&v[0], 2), std::slice::from_ref(&x), opts))?;
    run("gelu", finite_diff_check(|t, v| t.gelu(&v[0]), std::slice::from_ref(&x), opts))?;
    run("softplus", finite_diff_check(|t, v| t.softplus(&v[0]), std::slice::from_ref(&x), opts))?;
    run("tanh", finite_diff_check(|t, v| t.tanh(&v[0]), std::slice::from_ref(&x), opts))?;
    run("relu", finite_diff_check(|t, v| t.relu(&v[0]), std::slice::from_ref(&kx), opts))?;
    run("ln", finite_diff_check(|t, v| t.ln(&v[0]), std::slice::from_ref(&pos), opts))?;
    run("pos_pow", finite_diff_check(|t, v| t.pos_pow(&v[0], 0.3), std::slice::from_ref(&pos), opts))?;
    run("add", finite_diff_check(|t, v| t.add(&v[0], &v[1]), &[x.clone(), x2.clone()], opts))?;
    run("sub", finite_diff_check(|t, v| t.sub(&v[0], &v[1]), &[x.clone(), x2.clone()], opts))?;
    run("mul", finite_diff_check(|t, v| t.mul(&v[0], &v[1]), &[x.clone(), x2.clone()], opts))?;
    run("div", finite_diff_check(|t, v| t.div(&v[0], &v[1]), &[x.clone(), pos.clone()], opts))?;
    run("add_scalar", finite_diff_check(|t, v| t.add_scalar(&v[0], 0.7), std::slice::from_ref(&x), opts))?;
    run("mul_scalar", finite_diff_check(|t, v| t.mul_scalar(&v[0], -1.3), std::slice::from_ref(&x), opts))?;
    run("channel_mul", finite_diff_check(|t, v| t.channel_mul(&v[0], &v[1]), &[x.clone(), v.clone()], opts))?;
    run("channel_add", finite_diff_check(|t, v| t.channel_add(&v[0], &v[1]), &[x.clone(), v], opts))?;
    run("channel_concat", finite_diff_check(|t, v| t.concat(&[&v[0], &v[1]]), &[x.clone(), x2.clone()], opts))?;
    run("channel_slice", finite_diff_check(|t, v| t.slice(&v[0], 2, 4), std::slice::from_ref(&x), opts))?;
    run("sum_all", finite_diff_check(|t, v| t.sum_all(&v[0]), std::slice::from_ref(&x), opts))?;
    run("mean_spatial", finite_diff_check(|t, v| t.mean_spatial(&v[0]), std::slice::from_ref(&x), opts))?;
    run("spatial_shift", finite_diff_check(|t, v| t.spatial_shift(&v[0], &spec), std::slice::from_ref(&x), opts))?;
    run("channel_shuffle", finite_diff_check(|t, v| t.channel_shuffle(&v[0], 4), std::slice::from_ref(&x), opts))?;
    run(
        "gaussian_interval",
        finite_diff_check(|t, v| t.gaussian_interval(&v[0], &v[1], &v[2], 1e-9), &[x.clone(), x2, sigma], opts),
    )?;
    run("logistic_interval", finite_diff_check(|t, v| t.logistic_interval(&v[0], &v[1], 1e-9), &[lower, upper], opts))?;
    run("sep_filter_valid", finite_diff_check(|t, v| t.sep_filter_valid(&v[0], &taps), std::slice::from_ref(&img), opts))?;
    run("crop", finite_diff_check(|t, v| t.crop(&v[0], 5, 3), &[img], opts))?;
    Ok(out)
}
