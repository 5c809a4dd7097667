//! Rate–distortion training.
//!
//! Each step draws a batch, runs the model with the configured quantization
//! proxy, forms `L = R + λ·D`, backpropagates, clips the global gradient
//! norm and applies Adam. MSE distortion is measured on 255-scaled pixels,
//! so `λ` carries the conventional magnitudes.

pub mod data;
pub mod metrics;
pub mod optim;

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::entropy::{rate_term, QuantMode};
use crate::error::{Error, TensorError, TrainError};
use crate::net::Model;
use crate::tensor::{Element, Tape, Tensor, Var};

pub use data::Dataset;
pub use optim::{clip_grads, Adam, AdamConfig};

pub const LAMBDAS_MSE: [f64; 7] = [0.0035, 0.005, 0.0067, 0.0130, 0.0250, 0.050, 0.100];
pub const LAMBDAS_MS_SSIM: [f64; 7] = [5.0, 6.51, 8.73, 16.64, 31.73, 60.50, 140.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl Distortion {
    pub fn lambdas(self) -> &'static [f64; 7] {
        match self {
            Distortion::Mse => &LAMBDAS_MSE,
            Distortion::MsSsim => &LAMBDAS_MS_SSIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub distortion: Distortion,
    /// `(first epoch, learning rate)`, ascending.
    pub lr_schedule: Vec<(usize, f64)>,
    pub clip: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Defaults to one pass over the dataset.
    pub steps_per_epoch: Option<usize>,
    /// Caps the total step count.
    pub max_steps: Option<usize>,
    pub quant: QuantMode,
    /// Random cyclic translation of every patch.
    pub roll: bool,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Full-scale recipe.
    pub fn full(lambda: f64) -> Self {
        Self {
            lambda,
            distortion: Distortion::Mse,
            lr_schedule: vec![(0, 1e-4), (40, 5e-5), (80, 1e-5)],
            clip: 1.0,
            adam: AdamConfig::default(),
            batch_size: 16,
            patch: 256,
            epochs: 100,
            steps_per_epoch: None,
            max_steps: None,
            quant: QuantMode::Noise,
            roll: false,
            seed: 0,
            checkpoint_every: 1000,
        }
    }

    /// Single-core recipe: one rolled 64×64 patch per step at a fixed,
    /// larger rate. Rolling keeps a single training patch from being
    /// memorized through border position cues.
    pub fn desk(lambda: f64, steps: usize) -> Self {
        Self {
            roll: true,
            lr_schedule: vec![(0, 1e-3)],
            batch_size: 1,
            patch: 64,
            epochs: 1,
            steps_per_epoch: Some(steps),
            max_steps: Some(steps),
            checkpoint_every: 0,
            ..Self::full(lambda)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("λ must be finite and non-negative");
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return bad("learning-rate schedule must start at epoch 0");
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("learning-rate milestones must ascend");
        }
        if self.batch_size == 0 || self.patch == 0 {
            return bad("batch size and patch must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip threshold must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| dataset_len.div_ceil(self.batch_size)).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(dataset_len);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `R + λ·D`.
pub fn rd_loss_value(rate: f64, distortion: f64, lambda: f64) -> f64 {
    rate + lambda * distortion
}

/// Distortion on the tape: MSE on the 255 scale or `1 − MS-SSIM`.
pub fn distortion_var<F: Element>(
    tape: &Tape<F>,
    kind: Distortion,
    x: &Var<F>,
    x_hat: &Var<F>,
) -> Result<Var<F>, TensorError> {
    match kind {
        Distortion::Mse => metrics::mse_255(tape, x, x_hat),
        Distortion::MsSsim => {
            let s = metrics::ms_ssim_var(tape, x, x_hat)?;
            tape.add_scalar(&tape.mul_scalar(&s, -1.0)?, 1.0)
        }
    }
}

/// Loss, rate and distortion vars of one forward pass.
pub struct RdTerms<F: Element> {
    pub loss: Var<F>,
    pub rate: Var<F>,
    pub distortion: Var<F>,
}

pub fn rd_loss<F: Element, R: rand::Rng + ?Sized>(
    tape: &Tape<F>,
    model: &Model<F>,
    x: &Var<F>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RdTerms<F>, TensorError> {
    let [b, _, h, w] = x.shape();
    let f = model.forward(tape, x, cfg.quant, rng)?;
    let rate = rate_term(tape, &[&f.y_likelihood, &f.z_likelihood], b * h * w)?;
    let distortion = distortion_var(tape, cfg.distortion, x, &f.x_hat)?;
    let loss = tape.add(&rate, &tape.mul_scalar(&distortion, cfg.lambda)?)?;
    Ok(RdTerms {
        loss,
        rate,
        distortion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub lr: f64,
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lambda_index: u8,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|s| s.loss)
    }
}

pub const CSV_HEADER: &str = "step,loss,rate_bpp,distortion,lr";

fn write_csv(path: &PathBuf, log: &[StepLog]) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for s in log {
        writeln!(f, "{},{},{},{},{}", s.step, s.loss, s.rate, s.distortion, s.lr)?;
    }
    f.flush()?;
    Ok(())
}

/// Runs the configured number of steps on `model`. On a non-finite loss the
/// model keeps its last good parameters and no checkpoint is overwritten.
pub fn train_loop(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainReport, Error> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.adam);
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = cfg.total_steps(data.len());
    let mut report = TrainReport::default();
    for step in 0..total {
        let lr = cfg.lr_at(step / per_epoch);
        let batch = data.sample(cfg.batch_size, cfg.patch, cfg.roll, &mut rng)?;
        let tape = Tape::new();
        let x = Var::constant(batch);
        let terms = match rd_loss(&tape, model, &x, cfg, &mut rng) {
            Ok(t) => t,
            Err(TensorError::NonFinite { .. }) => return Err(TrainError::NonFiniteLoss { step }.into()),
            Err(e) => return Err(e.into()),
        };
        let scalar = |v: &Var<f32>| v.value().data()[0] as f64;
        let entry = StepLog {
            step,
            loss: scalar(&terms.loss),
            rate: scalar(&terms.rate),
            distortion: scalar(&terms.distortion),
            lr,
        };
        if !entry.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step }.into());
        }
        let grads = tape.backward(&terms.loss)?;
        model.params.zero_grads();
        grads.accumulate_into(&mut model.params)?;
        clip_grads(&mut model.params, cfg.clip)?;
        adam.step(&mut model.params, lr);
        report.log.push(entry);
        log::debug!("step {step} loss {:.5} R {:.5} D {:.5}", entry.loss, entry.rate, entry.distortion);
        if let Some(path) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, out.lambda_index, path)?;
            }
        }
    }
    if let Some(path) = &out.checkpoint {
        save_checkpoint(model, out.lambda_index, path)?;
    }
    if let Some(path) = &out.csv {
        write_csv(path, &report.log)?;
    }
    Ok(report)
}

/// Deterministic rate (rounded latents, exact likelihoods) and distortion
/// of `x`, whose sides must already fit the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub mse_255: f64,
    pub psnr_db: f64,
}

pub fn evaluate_rd<F: Element>(model: &Model<F>, x: &Tensor<F>) -> Result<RdPoint, Error> {
    let tape = Tape::no_grad();
    let [b, _, h, w] = x.shape();
    let xv = Var::constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = model.forward(&tape, &xv, QuantMode::Round, &mut rng)?;
    let rate = crate::entropy::rate_bits(&[f.y_likelihood.value(), f.z_likelihood.value()], b * h * w);
    let clamped = f.x_hat.value().map(|v| v.max(F::zero()).min(F::one()));
    let mse = metrics::mse(x, &clamped)?;
    Ok(RdPoint {
        rate,
        mse_255: mse,
        psnr_db: metrics::psnr_from_mse(mse),
    })
}
