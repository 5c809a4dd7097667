//! Channel Recursive Attention.
//!
//! The input passes an entry 1×1 conv and is split into `n` channel groups.
//! Group `i` is mean-pooled by `2^i`, filtered by a depthwise 3×3 and
//! replicated back up. The groups are folded left to right by feature
//! shuffle fusion (concat, channel shuffle, 1×1 conv keeping the width), so
//! widths grow `2N/n, 3N/n, …, N`. The fused map gates the block input,
//! `gelu(Y) ⊙ x + x`, and a channel shuffle plus SSB follow as a local
//! branch.

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::nn::{Conv1x1, DwConv3x3};
use crate::shift::{Ssb, SsbOptions};
use crate::tensor::{Element, ParamStore, Tape, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CraOptions {
    pub n_groups: usize,
    pub shuffle_groups: usize,
    /// Recursive feature-shuffle fusion; when off the pyramid outputs are
    /// concatenated directly.
    pub recursive_fusion: bool,
    /// Trailing shuffle + SSB.
    pub local_ssb: bool,
}

impl Default for CraOptions {
    fn default() -> Self {
        Self {
            n_groups: 4,
            shuffle_groups: 8,
            recursive_fusion: true,
            local_ssb: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cra {
    pub channels: usize,
    pub opts: CraOptions,
    pub entry: Conv1x1,
    pub dw: Vec<DwConv3x3>,
    pub fsf: Vec<Conv1x1>,
    pub local: Option<Ssb>,
}

impl Cra {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        opts: &CraOptions,
        ssb: &SsbOptions,
        rng: &mut R,
    ) -> std::result::Result<Self, TensorError> {
        let n = opts.n_groups;
        if n == 0 || !channels.is_multiple_of(n) {
            return Err(TensorError::divisibility(
                "cra",
                format!("{channels} channels not divisible by {n} groups"),
            ));
        }
        let per = channels / n;
        let sg = opts.shuffle_groups;
        let shuffle_err = |w: usize| {
            TensorError::divisibility("cra", format!("width {w} not divisible by {sg} shuffle groups"))
        };
        if opts.recursive_fusion {
            if let Some(w) = (2..=n).map(|k| k * per).find(|w| sg == 0 || w % sg != 0) {
                return Err(shuffle_err(w));
            }
        }
        if opts.local_ssb && (sg == 0 || !channels.is_multiple_of(sg)) {
            return Err(shuffle_err(channels));
        }
        let entry = Conv1x1::new(store, &format!("{name}.entry"), channels, channels, rng);
        let dw = (0..n)
            .map(|i| DwConv3x3::new(store, &format!("{name}.dw{i}"), per, rng))
            .collect();
        let fsf = if opts.recursive_fusion {
            (1..n)
                .map(|k| {
                    let w = (k + 1) * per;
                    Conv1x1::new(store, &format!("{name}.fsf{k}"), w, w, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        let local = opts
            .local_ssb
            .then(|| Ssb::new(store, &format!("{name}.local"), channels, channels, ssb, rng));
        Ok(Self {
            channels,
            opts: opts.clone(),
            entry,
            dw,
            fsf,
            local,
        })
    }

    /// Spatial sides must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.opts.n_groups - 1)
    }

    /// The recursively fused map `Y`, before gating.
    pub fn fused<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let [_, c, h, w] = x.shape();
        let m = self.spatial_multiple();
        if c != self.channels || h % m != 0 || w % m != 0 {
            return Err(TensorError::divisibility(
                "cra",
                format!("input {:?} for {} channels, sides multiple of {m}", x.shape(), self.channels),
            ));
        }
        let e = self.entry.forward(tape, store, x)?;
        let parts = tape.split(&e, self.opts.n_groups)?;
        let mut levels = Vec::with_capacity(parts.len());
        for (i, (p, dw)) in parts.iter().zip(&self.dw).enumerate() {
            let f = 1 << i;
            let d = tape.downsample(p, f)?;
            let d = dw.forward(tape, store, &d)?;
            levels.push(tape.upsample(&d, f)?);
        }
        if self.fsf.is_empty() {
            let refs: Vec<&Var<F>> = levels.iter().collect();
            return tape.concat(&refs);
        }
        let mut acc = levels[0].clone();
        for (conv, next) in self.fsf.iter().zip(&levels[1..]) {
            acc = fsf(tape, store, &acc, next, conv, self.opts.shuffle_groups)?;
        }
        Ok(acc)
    }

    /// `gelu(Y) ⊙ x + x`, before the local branch.
    pub fn gated<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let y = self.fused(tape, store, x)?;
        let g = tape.mul(&tape.gelu(&y)?, x)?;
        tape.add(&g, x)
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let out = self.gated(tape, store, x)?;
        match &self.local {
            Some(ssb) => {
                let s = tape.channel_shuffle(&out, self.opts.shuffle_groups)?;
                ssb.forward(tape, store, &s)
            }
            None => Ok(out),
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1x1> {
        std::iter::once(&self.entry)
            .chain(self.fsf.iter())
            .chain(self.local.iter().flat_map(|s| s.convs()))
    }

    pub fn weights(&self) -> u64 {
        self.convs().map(Conv1x1::weights).sum::<u64>() + self.dw.iter().map(DwConv3x3::weights).sum::<u64>()
    }

    pub fn biases(&self) -> u64 {
        self.convs().map(Conv1x1::biases).sum::<u64>() + self.dw.iter().map(DwConv3x3::biases).sum::<u64>()
    }

    /// Weight multiplies of one forward pass at `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = (h * w) as u64;
        let dense: u64 = self.convs().map(|c| c.macs_per_pixel() * hw).sum();
        let pyramid: u64 = self
            .dw
            .iter()
            .enumerate()
            .map(|(i, d)| d.macs_per_pixel() * ((h >> i) * (w >> i)) as u64)
            .sum();
        dense + pyramid
    }
}

/// `conv(shuffle(concat(a, b)))`.
pub fn fsf<F: Element>(
    tape: &Tape<F>,
    store: &ParamStore<F>,
    a: &Var<F>,
    b: &Var<F>,
    conv: &Conv1x1,
    shuffle_groups: usize,
) -> Result<Var<F>> {
    let cat = tape.concat(&[a, b])?;
    let s = tape.channel_shuffle(&cat, shuffle_groups)?;
    conv.forward(tape, store, &s)
}

/// Closed-form weight count `9N + 39/8·N²`.
pub fn cra_param_count(n: u64) -> Ratio<i128> {
    let n = Ratio::from_integer(n as i128);
    Ratio::from_integer(9) * n + Ratio::new(39, 8) * n * n
}

/// Closed-form multiplies `HW·(765/256·N + (7 + 13/16)·N²)`.
pub fn cra_flops(n: u64, h: u64, w: u64) -> Ratio<i128> {
    let n = Ratio::from_integer(n as i128);
    let hw = Ratio::from_integer((h * w) as i128);
    hw * (Ratio::new(765, 256) * n + Ratio::new(125, 16) * n * n)
}

/// Weight count of the module as built with default options:
/// entry `N²`, pyramid `9N`, fusion `29/16·N²`, local SSB `2N²`.
pub fn cra_constructed_param_count(n: u64) -> Ratio<i128> {
    let n = Ratio::from_integer(n as i128);
    Ratio::from_integer(9) * n + Ratio::new(77, 16) * n * n
}

/// Multiplies of the module as built with default options.
pub fn cra_constructed_flops(n: u64, h: u64, w: u64) -> Ratio<i128> {
    let n = Ratio::from_integer(n as i128);
    let hw = Ratio::from_integer((h * w) as i128);
    hw * (Ratio::new(765, 256) * n + Ratio::new(77, 16) * n * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, FdOptions};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(n: usize, opts: &CraOptions) -> (ParamStore<f64>, Cra) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cra = Cra::new(&mut store, "cra", n, opts, &SsbOptions::default(), &mut rng).unwrap();
        (store, cra)
    }

    #[test]
    fn closed_forms() {
        assert_eq!(cra_param_count(32), Ratio::from_integer(5280));
        assert_eq!(cra_param_count(0), Ratio::from_integer(0));
        assert_eq!(cra_flops(16, 1, 1), Ratio::new(20478125, 10000));
        assert_eq!(cra_flops(0, 8, 8), Ratio::from_integer(0));
    }

    #[test]
    fn constructed_count_matches_decomposition() {
        for n in [32usize, 64, 128] {
            let (store, cra) = build(n, &CraOptions::default());
            assert_eq!(Ratio::from_integer(cra.weights() as i128), cra_constructed_param_count(n as u64));
            let total: usize = store.iter().map(|(_, p)| p.value.numel()).sum();
            assert_eq!(total as u64, cra.weights() + cra.biases());
            assert_eq!(
                Ratio::from_integer(cra.macs(64, 64) as i128),
                cra_constructed_flops(n as u64, 64, 64)
            );
        }
    }

    #[test]
    fn tape_count_matches_structural_count() {
        let (store, cra) = build(32, &CraOptions::default());
        let tape = Tape::no_grad();
        let x = Var::constant(Tensor::zeros([1, 32, 16, 16]));
        cra.forward(&tape, &store, &x).unwrap();
        assert_eq!(tape.stats().conv_macs, cra.macs(16, 16));
    }

    #[test]
    fn zero_weights_make_gate_inert() {
        let (mut store, cra) = build(32, &CraOptions::default());
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let s = store.value(id).shape();
            store.set_value(id, Tensor::zeros(s)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([1, 32, 8, 8], -2.0, 2.0, &mut rng);
        let tape = Tape::no_grad();
        let y = cra.gated(&tape, &store, &Var::constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn shape_is_preserved() {
        for (n, h, w) in [(32, 8, 16), (64, 16, 8), (32, 24, 40)] {
            let (store, cra) = build(n, &CraOptions::default());
            let tape = Tape::no_grad();
            let y = cra.forward(&tape, &store, &Var::constant(Tensor::zeros([2, n, h, w]))).unwrap();
            assert_eq!(y.shape(), [2, n, h, w]);
        }
    }

    #[test]
    fn rejects_indivisible_sides() {
        let (store, cra) = build(32, &CraOptions::default());
        let tape = Tape::no_grad();
        assert!(cra.forward(&tape, &store, &Var::constant(Tensor::zeros([1, 32, 12, 12]))).is_err());
    }

    #[test]
    fn pyramid_touches_each_channel_once() {
        // with fusion off and an identity entry, Y is the per-channel dw output
        let opts = CraOptions {
            recursive_fusion: false,
            local_ssb: false,
            ..CraOptions::default()
        };
        let (mut store, cra) = build(8, &opts);
        let mut eye = Tensor::zeros([8, 8, 1, 1]);
        for i in 0..8 {
            eye.set(i, i, 0, 0, 1.0);
        }
        store.set_value(cra.entry.weight, eye).unwrap();
        store.set_value(cra.entry.bias, Tensor::zeros([1, 8, 1, 1])).unwrap();
        let mut x = Tensor::zeros([1, 8, 8, 8]);
        x.set(0, 5, 0, 0, 1.0);
        let tape = Tape::no_grad();
        let y = cra.fused(&tape, &store, &Var::constant(x)).unwrap();
        // only channel 5 departs from its bias-only response
        let zero = cra.fused(&tape, &store, &Var::constant(Tensor::zeros([1, 8, 8, 8]))).unwrap();
        for c in 0..8 {
            let differs = y.value().plane(0, c) != zero.value().plane(0, c);
            assert_eq!(differs, c == 5, "channel {c}");
        }
    }

    #[test]
    fn fsf_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv1x1::new(&mut store, "f", 6, 6, &mut rng);
        let mut eye = Tensor::zeros([6, 6, 1, 1]);
        for i in 0..6 {
            eye.set(i, i, 0, 0, 1.0);
        }
        store.set_value(conv.weight, eye).unwrap();
        store.set_value(conv.bias, Tensor::zeros([1, 6, 1, 1])).unwrap();
        let a = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let tape = Tape::no_grad();
        let (va, vb) = (Var::constant(a.clone()), Var::constant(b.clone()));
        let y = fsf(&tape, &store, &va, &vb, &conv, 1).unwrap();
        let cat = crate::tensor::kernels::channel_concat(&[&a, &b]).unwrap();
        assert_eq!(y.value(), &cat);
        store.set_value(conv.weight, Tensor::zeros([6, 6, 1, 1])).unwrap();
        let y = fsf(&tape, &store, &va, &vb, &conv, 2).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fsf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv1x1::new(&mut store, "f", 8, 8, &mut rng);
        let a = Tensor::uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| fsf(t, &store, &v[0], &v[1], &conv, 8),
            &[a, b],
            FdOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cra_gradient_matches_finite_differences() {
        let (store, cra) = build(32, &CraOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([1, 32, 8, 8], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| cra.forward(t, &store, &v[0]),
            &[x],
            FdOptions {
                max_coords: Some(64),
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
