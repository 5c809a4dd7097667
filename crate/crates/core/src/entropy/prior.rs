//! Per-channel learned CDF for the hyper-latent.
//!
//! Each channel owns a small monotone network `R → R` mapping a value to the
//! logit of its CDF. Layers are `x ← softplus(H_k)·x + b_k`, followed on all
//! but the last layer by `x ← x + tanh(a_k) ⊙ tanh(x)`. Non-negative
//! matrices and `|tanh(a)| < 1` keep every layer nondecreasing.
//!
//! On the tape all channels are evaluated together as grouped 1×1
//! convolutions with one group per channel.

use rand::Rng;

use super::range_coder::Cdf;
use super::LIKELIHOOD_FLOOR;
use crate::error::{EntropyError, TensorError};
use crate::tensor::kernels::softplus_f64;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

/// Hidden widths between the scalar input and scalar output.
pub const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;
/// Coded support is cut where each tail holds at most this mass.
pub const TAIL_MASS: f64 = 1e-9;
/// Hard bound on the coded support half-width.
pub const MAX_SUPPORT: i64 = 2048;

#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    pub channels: usize,
    pub matrices: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub factors: Vec<ParamId>,
}

fn dims() -> Vec<usize> {
    let mut d = vec![1];
    d.extend(FILTERS);
    d.push(1);
    d
}

impl FactorizedPrior {
    pub fn new<F: Element, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut R) -> Self {
        let d = dims();
        let layers = d.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            let (fin, fout) = (d[k], d[k + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(store.add(
                format!("{name}.matrix{k}"),
                Tensor::full([channels * fout, fin, 1, 1], F::c(init)),
            ));
            biases.push(store.add(
                format!("{name}.bias{k}"),
                Tensor::uniform([1, channels * fout, 1, 1], -0.5, 0.5, rng),
            ));
            if k + 1 < layers {
                factors.push(store.add(format!("{name}.factor{k}"), Tensor::zeros([1, channels * fout, 1, 1])));
            }
        }
        Self {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    /// CDF logits of every element of `v` under its channel's network.
    pub fn logits<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, v: &Var<F>) -> Result<Var<F>, TensorError> {
        let mut x = v.clone();
        for k in 0..self.matrices.len() {
            let h = tape.softplus(&tape.param(store, self.matrices[k]))?;
            let b = tape.param(store, self.biases[k]);
            x = tape.conv1x1(&x, &h, Some(&b), self.channels)?;
            if let Some(&a) = self.factors.get(k) {
                let a = tape.tanh(&tape.param(store, a))?;
                let t = tape.tanh(&x)?;
                x = tape.add(&x, &tape.channel_mul(&t, &a)?)?;
            }
        }
        Ok(x)
    }

    /// Mass of `[z − ½, z + ½]`, floored.
    pub fn likelihood<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, z: &Var<F>) -> Result<Var<F>, TensorError> {
        let lower = self.logits(tape, store, &tape.add_scalar(z, -0.5)?)?;
        let upper = self.logits(tape, store, &tape.add_scalar(z, 0.5)?)?;
        tape.logistic_interval(&lower, &upper, LIKELIHOOD_FLOOR)
    }

    /// Scalar logit of channel `c` at `x`, evaluated in 64-bit.
    pub fn logit_f64<F: Element>(&self, store: &ParamStore<F>, c: usize, x: f64) -> f64 {
        let d = dims();
        let mut v = vec![x];
        for k in 0..self.matrices.len() {
            let (fin, fout) = (d[k], d[k + 1]);
            let h = store.value(self.matrices[k]).data();
            let b = store.value(self.biases[k]).data();
            let mut next = vec![0.0; fout];
            for o in 0..fout {
                let row = (c * fout + o) * fin;
                let mut acc = b[c * fout + o].f64();
                for (i, vi) in v.iter().enumerate() {
                    acc += softplus_f64(h[row + i].f64()) * vi;
                }
                next[o] = acc;
            }
            if let Some(&a) = self.factors.get(k) {
                let a = store.value(a).data();
                for (o, n) in next.iter_mut().enumerate() {
                    *n += a[c * fout + o].f64().tanh() * n.tanh();
                }
            }
            v = next;
        }
        v[0]
    }

    pub fn cdf_f64<F: Element>(&self, store: &ParamStore<F>, c: usize, x: f64) -> f64 {
        let l = self.logit_f64(store, c, x);
        if l >= 0.0 {
            1.0 / (1.0 + (-l).exp())
        } else {
            let e = l.exp();
            e / (1.0 + e)
        }
    }

    /// Interval mass `P(v − ½ < Z ≤ v + ½)` of channel `c`.
    pub fn mass_f64<F: Element>(&self, store: &ParamStore<F>, c: usize, v: f64) -> f64 {
        let lo = self.logit_f64(store, c, v - 0.5);
        let hi = self.logit_f64(store, c, v + 0.5);
        crate::tensor::kernels::logistic_interval_scalar(lo, hi)
    }

    /// Integer support `[lo, hi]` of channel `c` outside which each tail
    /// carries at most [`TAIL_MASS`].
    pub fn support<F: Element>(&self, store: &ParamStore<F>, c: usize) -> (i64, i64) {
        let below = |v: i64| self.cdf_f64(store, c, v as f64 - 0.5) <= TAIL_MASS;
        let above = |v: i64| 1.0 - self.cdf_f64(store, c, v as f64 + 0.5) <= TAIL_MASS;
        // largest lo with the left tail small enough
        let (mut a, mut b) = (-MAX_SUPPORT, MAX_SUPPORT);
        let lo = if !below(a) {
            a
        } else {
            while a < b {
                let m = a + (b - a + 1) / 2;
                if below(m) {
                    a = m;
                } else {
                    b = m - 1;
                }
            }
            a
        };
        // smallest hi with the right tail small enough
        let (mut a, mut b) = (lo, MAX_SUPPORT);
        let hi = if !above(b) {
            b
        } else {
            while a < b {
                let m = a + (b - a) / 2;
                if above(m) {
                    b = m;
                } else {
                    a = m + 1;
                }
            }
            a
        };
        (lo, hi.max(lo))
    }

    /// Quantized coding table for channel `c`: symbols `lo..=hi` followed
    /// by one escape symbol holding the tail mass.
    pub fn coding_table<F: Element>(&self, store: &ParamStore<F>, c: usize) -> Result<ZTable, EntropyError> {
        let (lo, hi) = self.support(store, c);
        let mut pmf: Vec<f64> = (lo..=hi).map(|v| self.mass_f64(store, c, v as f64)).collect();
        let inside: f64 = pmf.iter().sum();
        pmf.push((1.0 - inside).max(0.0));
        Ok(ZTable {
            lo,
            hi,
            cdf: Cdf::from_pmf(&pmf)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ZTable {
    pub lo: i64,
    pub hi: i64,
    pub cdf: Cdf,
}

impl ZTable {
    pub fn escape(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check_params, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64) -> (ParamStore<f64>, FactorizedPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = FactorizedPrior::new(&mut store, "prior", 3, &mut rng);
        // perturb so the factors are active
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let mut v = (**store.value(id)).clone();
            for x in v.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
            store.set_value(id, v).unwrap();
        }
        (store, p)
    }

    use rand::Rng;

    #[test]
    fn tape_and_scalar_paths_agree() {
        let (store, p) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f64>::uniform([2, 3, 2, 2], -4.0, 4.0, &mut rng);
        let tape = Tape::no_grad();
        let lik = p.likelihood(&tape, &store, &Var::constant(z.clone())).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let v = z.at(n, c, i, j);
                        let expect = p.mass_f64(&store, c, v).max(LIKELIHOOD_FLOOR);
                        assert!((lik.value().at(n, c, i, j) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cdf_is_monotone_and_sums_to_one() {
        let (store, p) = build(3);
        for c in 0..3 {
            let mut last = 0.0;
            for k in -400..=400 {
                let v = self::cdf(&p, &store, c, k as f64 * 0.1);
                assert!(v >= last);
                last = v;
            }
            let (lo, hi) = p.support(&store, c);
            assert!(lo <= hi && lo >= -MAX_SUPPORT && hi <= MAX_SUPPORT);
            let total: f64 = (lo - 50..=hi + 50).map(|v| p.mass_f64(&store, c, v as f64)).sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(p.cdf_f64(&store, c, lo as f64 - 0.5) <= TAIL_MASS);
            assert!(1.0 - p.cdf_f64(&store, c, hi as f64 + 0.5) <= TAIL_MASS);
        }
    }

    fn cdf(p: &FactorizedPrior, store: &ParamStore<f64>, c: usize, x: f64) -> f64 {
        p.cdf_f64(store, c, x)
    }

    #[test]
    fn coding_table_is_valid() {
        let (store, p) = build(4);
        for c in 0..3 {
            let t = p.coding_table(&store, c).unwrap();
            assert_eq!(t.cdf.len(), t.escape() + 1);
        }
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let (store, p) = build(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::<f64>::uniform([1, 3, 2, 2], -2.0, 2.0, &mut rng);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let err = finite_diff_check_params(
            |t, s| p.likelihood(t, s, &Var::constant(z.clone())),
            &store,
            &ids,
            FdOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
