//! Analysis, synthesis and hyper transforms of the codec.
//!
//! `g_a` runs four stages of space-to-channel (×2), a channel-reducing 1×1
//! conv and a stack of SSBs, with CRA after the configured stages, then a
//! 1×1 conv to `M` channels. `g_s` mirrors it. `h_a` applies two further
//! ×2 reductions with two SSBs each; `h_s` mirrors with one SSB per stage
//! and emits `2M` channels split into the mean and the raw scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cra::{Cra, CraOptions};
use crate::entropy::{quantize, FactorizedPrior, QuantMode, LIKELIHOOD_FLOOR};
use crate::error::{Error, TensorError};
use crate::nn::Conv1x1;
use crate::shift::{Ssb, SsbOptions};
use crate::tensor::{Element, ParamStore, Tape, Var};

type TResult<T> = std::result::Result<T, TensorError>;

/// Lower bound of the predicted scale; equals the smallest coding scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Total spatial reduction of `g_a` followed by `h_a`.
pub const BASE_MULTIPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Small,
    Medium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: Scale,
    /// Internal width.
    pub n: usize,
    /// Latent channels.
    pub m: usize,
    /// Per-stage widths of the main transforms; `[n; 4]` when absent.
    pub stage_widths: Option<Vec<usize>>,
    pub ssb_per_stage: usize,
    /// SSBs per stage in `h_a` and `h_s`.
    pub hyper_ssb: (usize, usize),
    pub cra_enabled: bool,
    /// 1-based `g_a` stages followed by a CRA.
    pub cra_stages: Vec<usize>,
    pub ssb: SsbOptions,
    pub cra: CraOptions,
    /// Channels of `z`.
    pub hyper_width: usize,
    /// Width between the two hyper stages; `m` when absent.
    pub hyper_hidden: Option<usize>,
}

/// Structural variants for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoShift,
    NoTrailingConv,
    NoRecursiveFusion,
    NoLocalSsb,
    NoCra,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoShift,
        Ablation::NoTrailingConv,
        Ablation::NoRecursiveFusion,
        Ablation::NoLocalSsb,
        Ablation::NoCra,
        Ablation::Full,
    ];

    pub fn case_name(self) -> &'static str {
        match self {
            Ablation::NoShift => "case1",
            Ablation::NoTrailingConv => "case2",
            Ablation::NoRecursiveFusion => "case3",
            Ablation::NoLocalSsb => "case4",
            Ablation::NoCra => "case5",
            Ablation::Full => "case6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.case_name() == s)
    }
}

impl ModelConfig {
    pub fn small() -> Self {
        Self {
            scale: Scale::Small,
            n: 160,
            m: 320,
            // widened first stage; Medium totals calibrate to ~175 KMACs/px, ~5.2M params
            stage_widths: Some(vec![192, 160, 160, 160]),
            ssb_per_stage: 3,
            hyper_ssb: (2, 1),
            cra_enabled: false,
            cra_stages: vec![2, 4],
            ssb: SsbOptions::default(),
            cra: CraOptions::default(),
            hyper_width: 192,
            hyper_hidden: None,
        }
    }

    pub fn medium() -> Self {
        Self {
            scale: Scale::Medium,
            cra_enabled: true,
            ..Self::small()
        }
    }

    /// Desk-scale Small topology.
    pub fn tiny() -> Self {
        Self {
            n: 32,
            m: 64,
            stage_widths: None,
            hyper_width: 48,
            ..Self::small()
        }
    }

    /// Desk-scale Medium topology.
    pub fn desk_medium() -> Self {
        Self {
            n: 32,
            m: 64,
            stage_widths: None,
            hyper_width: 48,
            ..Self::medium()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "medium" => Some(Self::medium()),
            "tiny" => Some(Self::tiny()),
            "desk-medium" => Some(Self::desk_medium()),
            _ => None,
        }
    }

    pub fn ablate(mut self, a: Ablation) -> Self {
        match a {
            Ablation::NoShift => self.ssb.shift_enabled = false,
            Ablation::NoTrailingConv => self.ssb.trailing_conv = false,
            Ablation::NoRecursiveFusion => self.cra.recursive_fusion = false,
            Ablation::NoLocalSsb => self.cra.local_ssb = false,
            Ablation::NoCra => self.cra_enabled = false,
            Ablation::Full => {}
        }
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stage_widths.clone().unwrap_or_else(|| vec![self.n; 4])
    }

    pub fn hidden(&self) -> usize {
        self.hyper_hidden.unwrap_or(self.m)
    }

    pub fn has_cra(&self, stage: usize) -> bool {
        self.cra_enabled && self.cra_stages.contains(&stage)
    }

    /// Image sides must be multiples of this.
    pub fn pad_multiple(&self) -> usize {
        let mut m = BASE_MULTIPLE;
        if self.cra_enabled {
            for &s in &self.cra_stages {
                m = lcm(m, 1 << (s + self.cra.n_groups.max(1) - 1));
            }
        }
        m
    }

    pub fn validate(&self) -> Result<(), Error> {
        let widths = self.widths();
        if widths.len() != 4 || widths.contains(&0) {
            return Err(Error::Config(format!("need four positive stage widths, got {widths:?}")));
        }
        if self.m == 0 || self.hyper_width == 0 || self.hidden() == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.cra_stages.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::Config(format!("CRA stages {:?} outside 1..=4", self.cra_stages)));
        }
        let g = self.ssb.shift.groups;
        if self.ssb.shift_enabled {
            self.ssb.shift.validate()?;
            let mut ssb_widths = widths.clone();
            if self.hyper_ssb.0 > 0 || self.hyper_ssb.1 > 0 {
                ssb_widths.extend([self.hidden(), self.hyper_width]);
            }
            if let Some(w) = ssb_widths.iter().find(|&&w| w % g != 0) {
                return Err(Error::Config(format!("width {w} not divisible by {g} shift groups")));
            }
        }
        if self.cra_enabled && !self.n.is_multiple_of(self.cra.n_groups.max(1)) {
            return Err(Error::Config(format!(
                "N = {} not divisible by {} CRA groups",
                self.n, self.cra.n_groups
            )));
        }
        Ok(())
    }

    /// One-byte identifier carried in bitstreams (folded FNV-1a of the
    /// serialized config).
    pub fn fingerprint(&self) -> u8 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h.to_le_bytes().iter().fold(0, |a, b| a ^ b)
    }

    /// Applies a `key=value` override; dotted keys address nested fields and
    /// the value is parsed as JSON, falling back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let next: ModelConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Debug, Clone)]
pub enum Block {
    SpaceToChannel,
    ChannelToSpace,
    Conv(Conv1x1),
    Ssb(Ssb),
    Cra(Cra),
}

/// A block list applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequence {
    pub blocks: Vec<(String, Block)>,
}

/// Size of one constructed layer at a given input resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub weights: u64,
    pub biases: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Ssb,
    Cra,
    Prior,
}

impl Sequence {
    fn push(&mut self, name: String, b: Block) {
        self.blocks.push((name, b));
    }

    pub fn forward<F: Element>(&self, tape: &Tape<F>, store: &ParamStore<F>, x: &Var<F>) -> TResult<Var<F>> {
        let mut h = x.clone();
        for (_, b) in &self.blocks {
            h = match b {
                Block::SpaceToChannel => tape.space_to_channel(&h, 2)?,
                Block::ChannelToSpace => tape.channel_to_space(&h, 2)?,
                Block::Conv(c) => c.forward(tape, store, &h)?,
                Block::Ssb(s) => s.forward(tape, store, &h)?,
                Block::Cra(c) => c.forward(tape, store, &h)?,
            };
        }
        Ok(h)
    }

    /// Per-layer counts for an input of `h × w`.
    pub fn counts(&self, mut h: usize, mut w: usize, out: &mut Vec<LayerCount>) -> (usize, usize) {
        for (name, b) in &self.blocks {
            let row = |kind, cin, cout, weights, biases, macs| LayerCount {
                name: name.clone(),
                kind,
                cin,
                cout,
                height: h,
                width: w,
                weights,
                biases,
                macs,
            };
            let hw = (h * w) as u64;
            match b {
                Block::SpaceToChannel => {
                    h /= 2;
                    w /= 2;
                }
                Block::ChannelToSpace => {
                    h *= 2;
                    w *= 2;
                }
                Block::Conv(c) => out.push(row(LayerKind::Conv, c.cin, c.cout, c.weights(), c.biases(), c.macs_per_pixel() * hw)),
                Block::Ssb(s) => out.push(row(LayerKind::Ssb, s.cin(), s.cout(), s.weights(), s.biases(), s.macs_per_pixel() * hw)),
                Block::Cra(c) => out.push(row(LayerKind::Cra, c.channels, c.channels, c.weights(), c.biases(), c.macs(h, w))),
            }
        }
        (h, w)
    }
}

/// Parameter-free description of a model; ids index its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub g_a: Sequence,
    pub g_s: Sequence,
    pub h_a: Sequence,
    pub h_s: Sequence,
    pub prior: FactorizedPrior,
}

impl Layout {
    pub fn build<F: Element, R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        let widths = cfg.widths();
        let k = cfg.ssb_per_stage;

        let mut g_a = Sequence::default();
        let mut c = 3;
        for (s, &w) in widths.iter().enumerate() {
            let p = format!("g_a.s{}", s + 1);
            g_a.push(format!("{p}.s2c"), Block::SpaceToChannel);
            g_a.push(format!("{p}.conv"), Block::Conv(Conv1x1::new(store, &format!("{p}.conv"), 4 * c, w, rng)));
            for j in 0..k {
                let name = format!("{p}.ssb{j}");
                g_a.push(name.clone(), Block::Ssb(Ssb::new(store, &name, w, w, &cfg.ssb, rng)));
            }
            if cfg.has_cra(s + 1) {
                let name = format!("{p}.cra");
                g_a.push(name.clone(), Block::Cra(Cra::new(store, &name, w, &cfg.cra, &cfg.ssb, rng)?));
            }
            c = w;
        }
        g_a.push("g_a.out".into(), Block::Conv(Conv1x1::new(store, "g_a.out", c, cfg.m, rng)));

        let mut g_s = Sequence::default();
        let w4 = widths[3];
        g_s.push("g_s.in".into(), Block::Conv(Conv1x1::new(store, "g_s.in", cfg.m, w4, rng)));
        for s in (0..4).rev() {
            let w = widths[s];
            let next = if s == 0 { 3 } else { widths[s - 1] };
            let p = format!("g_s.s{}", s + 1);
            if cfg.has_cra(s + 1) {
                let name = format!("{p}.cra");
                g_s.push(name.clone(), Block::Cra(Cra::new(store, &name, w, &cfg.cra, &cfg.ssb, rng)?));
            }
            for j in 0..k {
                let name = format!("{p}.ssb{j}");
                g_s.push(name.clone(), Block::Ssb(Ssb::new(store, &name, w, w, &cfg.ssb, rng)));
            }
            g_s.push(format!("{p}.conv"), Block::Conv(Conv1x1::new(store, &format!("{p}.conv"), w, 4 * next, rng)));
            g_s.push(format!("{p}.c2s"), Block::ChannelToSpace);
        }

        let (hh, z) = (cfg.hidden(), cfg.hyper_width);
        let mut h_a = Sequence::default();
        for (s, (cin, cout)) in [(cfg.m, hh), (hh, z)].into_iter().enumerate() {
            let p = format!("h_a.s{}", s + 1);
            h_a.push(format!("{p}.s2c"), Block::SpaceToChannel);
            h_a.push(format!("{p}.conv"), Block::Conv(Conv1x1::new(store, &format!("{p}.conv"), 4 * cin, cout, rng)));
            for j in 0..cfg.hyper_ssb.0 {
                let name = format!("{p}.ssb{j}");
                h_a.push(name.clone(), Block::Ssb(Ssb::new(store, &name, cout, cout, &cfg.ssb, rng)));
            }
        }

        let mut h_s = Sequence::default();
        for (s, (cin, cout)) in [(z, hh), (hh, 2 * cfg.m)].into_iter().enumerate() {
            let p = format!("h_s.s{}", s + 1);
            for j in 0..cfg.hyper_ssb.1 {
                let name = format!("{p}.ssb{j}");
                h_s.push(name.clone(), Block::Ssb(Ssb::new(store, &name, cin, cin, &cfg.ssb, rng)));
            }
            h_s.push(format!("{p}.conv"), Block::Conv(Conv1x1::new(store, &format!("{p}.conv"), cin, 4 * cout, rng)));
            h_s.push(format!("{p}.c2s"), Block::ChannelToSpace);
        }

        let prior = FactorizedPrior::new(store, "prior", z, rng);
        Ok(Self {
            g_a,
            g_s,
            h_a,
            h_s,
            prior,
        })
    }
}

/// Tensors of one full forward pass.
#[derive(Debug, Clone)]
pub struct Forward<F: Element> {
    pub y: Var<F>,
    pub z: Var<F>,
    pub y_hat: Var<F>,
    pub z_hat: Var<F>,
    pub mu: Var<F>,
    pub sigma: Var<F>,
    pub y_likelihood: Var<F>,
    pub z_likelihood: Var<F>,
    pub x_hat: Var<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Element = f32> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<F>,
}

impl<F: Element> Model<F> {
    /// Deterministic construction from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn cast<G: Element>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_sides(&self, op: &'static str, h: usize, w: usize, multiple: usize) -> TResult<()> {
        if !h.is_multiple_of(multiple) || !w.is_multiple_of(multiple) || h == 0 || w == 0 {
            return Err(TensorError::Divisibility {
                op,
                detail: format!("{h}x{w} not a multiple of {multiple}"),
            });
        }
        Ok(())
    }

    pub fn analysis(&self, tape: &Tape<F>, x: &Var<F>) -> TResult<Var<F>> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(TensorError::Shape {
                op: "analysis",
                detail: format!("expected 3 channels, got {c}"),
            });
        }
        self.check_sides("analysis", h, w, self.config.pad_multiple())?;
        self.layout.g_a.forward(tape, &self.params, x)
    }

    pub fn synthesis(&self, tape: &Tape<F>, y_hat: &Var<F>) -> TResult<Var<F>> {
        let [_, c, h, w] = y_hat.shape();
        if c != self.config.m {
            return Err(TensorError::Shape {
                op: "synthesis",
                detail: format!("expected {} channels, got {c}", self.config.m),
            });
        }
        self.check_sides("synthesis", h, w, self.config.pad_multiple() / 16)?;
        self.layout.g_s.forward(tape, &self.params, y_hat)
    }

    pub fn hyper_analysis(&self, tape: &Tape<F>, y: &Var<F>) -> TResult<Var<F>> {
        let [_, _, h, w] = y.shape();
        self.check_sides("hyper_analysis", h, w, 4)?;
        self.layout.h_a.forward(tape, &self.params, y)
    }

    /// `(μ, σ)` with `σ = softplus(raw) + σ_min`.
    pub fn hyper_synthesis(&self, tape: &Tape<F>, z_hat: &Var<F>) -> TResult<(Var<F>, Var<F>)> {
        let out = self.layout.h_s.forward(tape, &self.params, z_hat)?;
        let m = self.config.m;
        let mu = tape.slice(&out, 0, m)?;
        let raw = tape.slice(&out, m, m)?;
        let sigma = tape.add_scalar(&tape.softplus(&raw)?, SIGMA_MIN)?;
        Ok((mu, sigma))
    }

    /// Full pass with the given quantization proxy.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape<F>,
        x: &Var<F>,
        mode: QuantMode,
        rng: &mut R,
    ) -> TResult<Forward<F>> {
        let y = self.analysis(tape, x)?;
        let z = self.hyper_analysis(tape, &y)?;
        let z_hat = quantize(tape, &z, mode, None, rng)?;
        let (mu, sigma) = self.hyper_synthesis(tape, &z_hat)?;
        let y_hat = quantize(tape, &y, mode, Some(&mu), rng)?;
        let y_likelihood = tape.gaussian_interval(&y_hat, &mu, &sigma, LIKELIHOOD_FLOOR)?;
        let z_likelihood = self.layout.prior.likelihood(tape, &self.params, &z_hat)?;
        let x_hat = self.synthesis(tape, &y_hat)?;
        Ok(Forward {
            y,
            z,
            y_hat,
            z_hat,
            mu,
            sigma,
            y_likelihood,
            z_likelihood,
            x_hat,
        })
    }

    /// Per-layer weights, biases and multiplies at an `h × w` input.
    pub fn layer_counts(&self, h: usize, w: usize) -> Vec<LayerCount> {
        let mut rows = Vec::new();
        let (yh, yw) = self.layout.g_a.counts(h, w, &mut rows);
        self.layout.h_a.counts(yh, yw, &mut rows);
        self.layout.h_s.counts(yh / 4, yw / 4, &mut rows);
        self.layout.g_s.counts(yh, yw, &mut rows);
        let prior = &self.layout.prior;
        let weights: u64 = prior.matrices.iter().map(|&id| self.params.value(id).numel() as u64).sum::<u64>()
            + prior.factors.iter().map(|&id| self.params.value(id).numel() as u64).sum::<u64>();
        let biases: u64 = prior.biases.iter().map(|&id| self.params.value(id).numel() as u64).sum();
        rows.push(LayerCount {
            name: "prior".into(),
            kind: LayerKind::Prior,
            cin: prior.channels,
            cout: prior.channels,
            height: yh / 4,
            width: yw / 4,
            weights,
            biases,
            macs: 0,
        });
        rows
    }
}
