//! Masked-feature training: a fixed 0-1 spatial mask multiplied into the
//! denoiser's embedded features at train and test time, plus the
//! gradient-descent training loop that uses it.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::cassi::{add_shot_noise, forward_project, HsiCube, SensingOperator};
use crate::error::{Error, Result};
use crate::hqs::UnfoldingModel;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Spatial 0-1 mask with an exact number of zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    zero_ratio: f64,
    seed: u64,
}

/// Draws a mask with exactly `round(zero_ratio * H * W)` zeros, placed by a
/// seeded uniform shuffle.
pub fn generate_mask(height: usize, width: usize, zero_ratio: f64, seed: u64) -> Result<FeatureMask> {
    if !(0.0..1.0).contains(&zero_ratio) {
        return Err(Error::arg(format!("zero ratio must be in [0, 1), got {zero_ratio}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::dim("feature mask needs positive dimensions"));
    }
    let n = height * width;
    let zeros = (zero_ratio * n as f64).round() as usize;
    let mut values: Vec<f64> = (0..n).map(|i| if i < zeros { 0.0 } else { 1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    values.shuffle(&mut rng);
    Ok(FeatureMask {
        height,
        width,
        values,
        zero_ratio,
        seed,
    })
}

impl FeatureMask {
    /// Rebuilds a mask from stored values, checking it is 0-1 valued.
    pub fn from_parts(height: usize, width: usize, values: Vec<f64>, zero_ratio: f64, seed: u64) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "feature mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("feature mask values must be 0 or 1"));
        }
        Ok(FeatureMask {
            height,
            width,
            values,
            zero_ratio,
            seed,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn zero_ratio(&self) -> f64 {
        self.zero_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0.0).count()
    }

    /// SHA-256 over dimensions and values, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for &v in &self.values {
            h.update([v as u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Multiplies every channel of a `[C, H, W]` feature by the mask.
pub fn apply_mask(tape: &mut Tape, feature: Var, mask: &FeatureMask) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::dim(format!(
            "feature {s:?} does not match the {}x{} feature mask",
            mask.height, mask.width
        )));
    }
    let data = mask.values.repeat(s[0]);
    let m = tape.constant(Tensor::new(s, data)?);
    tape.mul(feature, m)
}

/// Loss used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Mse,
}

/// Optimizer and masking settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub masked: bool,
    pub zero_ratio: f64,
    pub mask_seed: u64,
    pub loss: LossKind,
    /// Detector bit depth for simulated shot noise; `None` trains noiseless.
    pub noise_bits: Option<u32>,
    pub noise_seed: u64,
    /// Experimental: draw a fresh mask every step instead of one per run.
    pub resample_mask: bool,
    /// Rescales the step so the global gradient norm never exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 100,
            batch_size: 1,
            masked: false,
            zero_ratio: 0.5,
            mask_seed: 0,
            loss: LossKind::Mse,
            noise_bits: None,
            noise_seed: 0,
            resample_mask: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.zero_ratio) {
            return Err(Error::arg(format!(
                "zero ratio must be in [0, 1), got {}",
                self.zero_ratio
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::arg(format!("gradient clip must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Cosine-annealed rate for step `step` of `steps`.
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / self.steps as f64;
        0.5 * self.learning_rate * (1.0 + (PI * t).cos())
    }
}

/// One training scene and the operator that measures it.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub cube: HsiCube,
    pub op: SensingOperator,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Batch-mean loss before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mask_digest: Option<String>,
}

/// Simulates the measurement for each sample, reconstructs with the mask
/// applied at every stage, and takes one gradient-descent step on all
/// weights including the per-stage estimation scalars.
pub fn train_step(
    model: &UnfoldingModel,
    weights: &mut ModelWeights,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    learning_rate: f64,
    mask: Option<&FeatureMask>,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::arg("empty training batch"));
    }
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let clean = forward_project(&sample.cube, &sample.op)?;
        let y = match cfg.noise_bits {
            Some(bits) => add_shot_noise(&clean, bits, cfg.noise_seed.wrapping_add(i as u64))?,
            None => clean,
        };
        let out = model.forward_on_tape(&mut tape, &bound, &y, &sample.op, mask)?;
        let target = tape.constant(sample.cube.to_tensor());
        let loss = match cfg.loss {
            LossKind::Mse => tape.mse(out.output, target)?,
        };
        losses.push(loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let total = tape.scale(total, 1.0 / losses.len() as f64);
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        let culprit = tape
            .first_non_finite()
            .map(|(i, name)| format!("node {i} ({name})"))
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(format!(
            "training loss is {loss}; first non-finite tensor: {culprit}"
        )));
    }
    let grads = tape.backward(total)?;
    let (norm, bad) = weights.gradient_norm(&bound, &grads);
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of weight {name:?}")));
    }
    let rate = match cfg.grad_clip {
        Some(c) if norm > c => learning_rate * c / norm,
        _ => learning_rate,
    };
    weights.apply_gradients(&bound, &grads, rate);
    Ok(StepReport {
        loss,
        grad_norm: norm,
        mask_digest: mask.map(FeatureMask::digest),
    })
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub mask_digests: Vec<String>,
    /// The mask used for the run, to be persisted and reused at test time.
    pub mask: Option<FeatureMask>,
}

/// Runs `cfg.steps` optimizer steps cycling through `samples` in batches.
pub fn train(
    model: &UnfoldingModel,
    weights: &mut ModelWeights,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("no training samples"));
    }
    let (h, w) = (samples[0].cube.height(), samples[0].cube.width());
    let mut mask = if cfg.masked {
        Some(generate_mask(h, w, cfg.zero_ratio, cfg.mask_seed)?)
    } else {
        None
    };
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        if cfg.masked && cfg.resample_mask && step > 0 {
            mask = Some(generate_mask(
                h,
                w,
                cfg.zero_ratio,
                cfg.mask_seed.wrapping_add(step as u64),
            )?);
        }
        let start = (step * cfg.batch_size) % samples.len();
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|i| samples[(start + i) % samples.len()].clone())
            .collect();
        let r = train_step(model, weights, &batch, cfg, cfg.rate_at(step), mask.as_ref())?;
        report.losses.push(r.loss);
        report.grad_norms.push(r.grad_norm);
        if let Some(d) = r.mask_digest {
            report.mask_digests.push(d);
        }
    }
    report.mask = mask;
    Ok(report)
}
