//! Grouped spatial shift, channel shuffle, and the Spatial Shift Block.
//!
//! A shift moves each channel group by an integer offset with zero fill:
//! `out[c, i, j] = x[c, i + α_g·s, j + β_g·s]` when in bounds, else 0. Offsets
//! reaching past the feature map produce an all-zero group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::nn::Conv1x1;
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Direction cycle used to fill offsets: the four diagonals first
/// (bottom-left, top-left, top-right, bottom-right), then the four axes
/// (down, up, left, right).
const DIRECTIONS: [(i32, i32); 8] = [
    (-1, 1),
    (1, 1),
    (1, -1),
    (-1, -1),
    (-1, 0),
    (1, 0),
    (0, 1),
    (0, -1),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub groups: usize,
    /// `(vertical, horizontal)` per group.
    pub offsets: Vec<(i32, i32)>,
    pub step: usize,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::with_groups(4, 1)
    }
}

impl ShiftSpec {
    /// `groups` offsets drawn from the direction cycle.
    pub fn with_groups(groups: usize, step: usize) -> Self {
        Self {
            groups,
            offsets: (0..groups).map(|g| DIRECTIONS[g % DIRECTIONS.len()]).collect(),
            step,
        }
    }

    pub fn single(alpha: i32, beta: i32, step: usize) -> Self {
        Self {
            groups: 1,
            offsets: vec![(alpha, beta)],
            step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.offsets.len() != self.groups || self.step == 0 {
            return Err(TensorError::shape(
                "spatial_shift",
                format!("{} groups with {} offsets, step {}", self.groups, self.offsets.len(), self.step),
            ));
        }
        Ok(())
    }

    pub fn scaled_offsets(&self) -> Vec<(isize, isize)> {
        let s = self.step as isize;
        self.offsets
            .iter()
            .map(|&(a, b)| (a as isize * s, b as isize * s))
            .collect()
    }
}

pub fn spatial_shift<F: Element>(x: &Tensor<F>, spec: &ShiftSpec) -> Result<Tensor<F>> {
    spec.validate()?;
    shift_by_offsets(x, &spec.scaled_offsets())
}

/// Shifts channel group `g` by `offsets[g]`; channels split evenly.
pub fn shift_by_offsets<F: Element>(x: &Tensor<F>, offsets: &[(isize, isize)]) -> Result<Tensor<F>> {
    let [bn, c, h, w] = x.shape();
    let g = offsets.len();
    if g == 0 || c % g != 0 {
        return Err(TensorError::divisibility(
            "spatial_shift",
            format!("{c} channels not divisible by {g} groups"),
        ));
    }
    let per = c / g;
    let (hi, wi) = (h as isize, w as isize);
    let mut out = Tensor::zeros(x.shape());
    for n in 0..bn {
        for ch in 0..c {
            let (a, b) = offsets[ch / per];
            let i0 = (-a).clamp(0, hi);
            let i1 = (hi - a).clamp(0, hi);
            let j0 = (-b).clamp(0, wi);
            let j1 = (wi - b).clamp(0, wi);
            if i0 >= i1 || j0 >= j1 {
                continue;
            }
            let src = x.plane(n, ch);
            let base = (n * c + ch) * h * w;
            let len = (j1 - j0) as usize;
            for i in i0..i1 {
                let si = (i + a) as usize;
                let sj = (j0 + b) as usize;
                let d = base + i as usize * w + j0 as usize;
                out.data_mut()[d..d + len].copy_from_slice(&src[si * w + sj..si * w + sj + len]);
            }
        }
    }
    Ok(out)
}

/// Interleaving permutation: `out[k] = in[perm[k]]`, from viewing channels
/// as `(groups, C/groups)` and transposing.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(TensorError::divisibility(
            "channel_shuffle",
            format!("{channels} channels not divisible by {groups} groups"),
        ));
    }
    let per = channels / groups;
    Ok((0..channels).map(|k| (k % groups) * per + k / groups).collect())
}

pub fn permute_channels<F: Element>(x: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let [bn, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for n in 0..bn {
        for (k, &src) in perm.iter().enumerate() {
            let d = (n * c + k) * hw;
            out.data_mut()[d..d + hw].copy_from_slice(x.plane(n, src));
        }
    }
    out
}

/// Inverse of [`permute_channels`] for the same `perm`.
pub fn unpermute_channels<F: Element>(x: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let [bn, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for n in 0..bn {
        for (k, &dst) in perm.iter().enumerate() {
            let d = (n * c + dst) * hw;
            out.data_mut()[d..d + hw].copy_from_slice(x.plane(n, k));
        }
    }
    out
}

pub fn channel_shuffle<F: Element>(x: &Tensor<F>, groups: usize) -> Result<Tensor<F>> {
    let perm = shuffle_permutation(x.channels(), groups)?;
    Ok(permute_channels(x, &perm))
}

/// Nonlinearity between the first 1×1 conv and the shift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Structural switches of an SSB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsbOptions {
    pub shift: ShiftSpec,
    pub shift_enabled: bool,
    pub trailing_conv: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for SsbOptions {
    fn default() -> Self {
        Self {
            shift: ShiftSpec::default(),
            shift_enabled: true,
            trailing_conv: true,
            activation: Activation::Gelu,
        }
    }
}

/// `conv2(shift(act(conv1(x)))) + shortcut(x)`; hidden width equals `cout`.
#[derive(Debug, Clone)]
pub struct Ssb {
    pub conv1: Conv1x1,
    pub conv2: Option<Conv1x1>,
    pub shortcut: Option<Conv1x1>,
    pub shift: Option<ShiftSpec>,
    pub activation: Activation,
}

impl Ssb {
    pub fn new<F: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        opts: &SsbOptions,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv1x1::new(store, &format!("{name}.conv1"), cin, cout, rng);
        let conv2 = opts
            .trailing_conv
            .then(|| Conv1x1::new(store, &format!("{name}.conv2"), cout, cout, rng));
        let shortcut = (cin != cout).then(|| Conv1x1::new(store, &format!("{name}.shortcut"), cin, cout, rng));
        Self {
            conv1,
            conv2,
            shortcut,
            shift: opts.shift_enabled.then(|| opts.shift.clone()),
            activation: opts.activation,
        }
    }

    pub fn cin(&self) -> usize {
        self.conv1.cin
    }

    pub fn cout(&self) -> usize {
        self.conv1.cout
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> Result<Var<F>> {
        let h = self.conv1.forward(tape, store, x)?;
        let mut h = match self.activation {
            Activation::Gelu => tape.gelu(&h)?,
            Activation::Relu => tape.relu(&h)?,
        };
        if let Some(spec) = &self.shift {
            h = tape.spatial_shift(&h, spec)?;
        }
        if let Some(c2) = &self.conv2 {
            h = c2.forward(tape, store, &h)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, store, x)?,
            None => x.clone(),
        };
        tape.add(&h, &skip)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1x1> {
        std::iter::once(&self.conv1)
            .chain(self.conv2.iter())
            .chain(self.shortcut.iter())
    }

    pub fn weights(&self) -> u64 {
        self.convs().map(Conv1x1::weights).sum()
    }

    pub fn biases(&self) -> u64 {
        self.convs().map(Conv1x1::biases).sum()
    }

    pub fn macs_per_pixel(&self) -> u64 {
        self.convs().map(Conv1x1::macs_per_pixel).sum()
    }
}

/// Weight count of an SSB with `m` input and `n` output channels.
pub fn ssb_param_count(m: u64, n: u64) -> u64 {
    if m == n {
        n * n + m * n
    } else {
        n * n + 2 * m * n
    }
}

pub fn ssb_flops(m: u64, n: u64, h: u64, w: u64) -> u64 {
    h * w * ssb_param_count(m, n)
}
