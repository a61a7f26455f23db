//! Half-quadratic-splitting unfolding: alternate a closed-form data step
//! with a learned denoiser for a fixed number of stages.
//!
//! Because `ΦΦᵀ` is diagonal for this sensing model, the data step
//! `argmin_x ||y - Φx||² + μ||x - z||²` reduces to
//! `x = z + Φᵀ[(y - Φz) ./ (μ + diag(ΦΦᵀ))]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, softplus_inverse, Tape, Var};
use crate::cassi::{
    adjoint_project, build_dense_phi, forward_project, phi_diag, shift_back, HsiCube, Measurement, SensingOperator,
};
use crate::denoiser::{Denoiser, NetConfig};
use crate::error::{Error, Result};
use crate::masked::FeatureMask;
use crate::tensor::Tensor;
use crate::weights::{BoundWeights, ModelWeights};

/// Penalty reached by the initial `α`.
pub const INIT_MU: f64 = 1.0;
/// Noise level reached by the initial `β`.
pub const INIT_SIGMA: f64 = 0.1;

/// Penalty `μ_k` and denoiser noise level `σ_k` for every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `μ_k = softplus(α_k)`, `σ_k = softplus(β_k)`.
pub fn estimate_stage_params(alpha: &[f64], beta: &[f64]) -> Result<StageParams> {
    if alpha.len() != beta.len() {
        return Err(Error::dim(format!(
            "{} penalty scalars but {} noise scalars",
            alpha.len(),
            beta.len()
        )));
    }
    Ok(StageParams {
        mu: alpha.iter().map(|&a| softplus(a)).collect(),
        sigma: beta.iter().map(|&b| softplus(b)).collect(),
    })
}

/// Closed-form data step.
pub fn data_step(z: &HsiCube, y: &Measurement, op: &SensingOperator, mu: f64) -> Result<HsiCube> {
    if !(mu > 0.0) {
        return Err(Error::arg(format!("penalty μ must be positive, got {mu}")));
    }
    let pz = forward_project(z, op)?;
    if (y.height(), y.width()) != (pz.height(), pz.width()) {
        return Err(Error::dim(format!(
            "measurement is {}x{}, operator produces {}x{}",
            y.height(),
            y.width(),
            pz.height(),
            pz.width()
        )));
    }
    let phi = phi_diag(op);
    let q: Vec<f64> = y
        .data()
        .iter()
        .zip(pz.data())
        .zip(&phi)
        .map(|((yv, pv), ph)| (yv - pv) / (mu + ph))
        .collect();
    let back = adjoint_project(&Measurement::new(y.height(), y.width(), q)?, op)?;
    let data = z.data().iter().zip(back.data()).map(|(a, b)| a + b).collect();
    HsiCube::new(z.height(), z.width(), z.bands(), data)
}

/// Reference data step: solves `(ΦᵀΦ + μI) x = Φᵀy + μz` with a dense
/// Cholesky factorization.
pub fn dense_oracle_data_step(z: &HsiCube, y: &Measurement, op: &SensingOperator, mu: f64) -> Result<HsiCube> {
    if !(mu > 0.0) {
        return Err(Error::arg(format!("penalty μ must be positive, got {mu}")));
    }
    let phi = build_dense_phi(op)?;
    let n = phi.ncols();
    if y.data().len() != phi.nrows() || z.data().len() != n {
        return Err(Error::dim("oracle inputs do not match the operator"));
    }
    let lhs = phi.transpose() * &phi + DMatrix::identity(n, n) * mu;
    let rhs = phi.transpose() * DVector::from_column_slice(y.data()) + DVector::from_column_slice(z.data()) * mu;
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::arg("dense data-step system is not positive definite"))?;
    let x = chol.solve(&rhs);
    HsiCube::new(z.height(), z.width(), z.bands(), x.as_slice().to_vec())
}

/// Stage count, weight sharing and the denoiser architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldConfig {
    pub stages: usize,
    pub share_weights: bool,
    pub net: NetConfig,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        UnfoldConfig {
            stages: 3,
            share_weights: true,
            net: NetConfig::default(),
        }
    }
}

/// Tape handles produced by one unrolled reconstruction.
#[derive(Clone, Debug)]
pub struct UnfoldOutput {
    /// Clamped final estimate `[bands, H, W]`.
    pub output: Var,
    pub init: Var,
    /// `(x_k, z_k)` per stage.
    pub stages: Vec<(Var, Var)>,
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
}

/// The unfolding network for a fixed band count.
pub struct UnfoldingModel {
    config: UnfoldConfig,
    denoiser: Denoiser,
}

impl UnfoldingModel {
    pub fn new(config: UnfoldConfig, bands: usize) -> Result<Self> {
        let denoiser = Denoiser::new(config.net.clone(), bands)?;
        Ok(UnfoldingModel { config, denoiser })
    }

    pub fn config(&self) -> &UnfoldConfig {
        &self.config
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn bands(&self) -> usize {
        self.denoiser.bands()
    }

    pub fn alpha_name(stage: usize) -> String {
        format!("stage{stage}.alpha")
    }

    pub fn beta_name(stage: usize) -> String {
        format!("stage{stage}.beta")
    }

    /// Weight prefix of the denoiser used at `stage`.
    pub fn net_prefix(&self, stage: usize) -> String {
        if self.config.share_weights {
            "net.".to_string()
        } else {
            format!("stage{stage}.net.")
        }
    }

    fn denoiser_count(&self) -> usize {
        if self.config.share_weights {
            usize::from(self.config.stages > 0)
        } else {
            self.config.stages
        }
    }

    /// Seeded initialization: denoiser weights plus `α_k`, `β_k` chosen so
    /// that `μ_k = 1` and `σ_k = 0.1`.
    pub fn init_weights(&self, seed: u64) -> Result<ModelWeights> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::new();
        for k in 0..self.config.stages {
            w.insert(Self::alpha_name(k), Tensor::vector(vec![softplus_inverse(INIT_MU)]))?;
            w.insert(Self::beta_name(k), Tensor::vector(vec![softplus_inverse(INIT_SIGMA)]))?;
        }
        for k in 0..self.denoiser_count() {
            self.denoiser.init_weights(&mut w, &self.net_prefix(k), &mut rng)?;
        }
        Ok(w)
    }

    /// Expected names and shapes of the model weights.
    pub fn weight_layout(&self) -> Result<std::collections::BTreeMap<String, Vec<usize>>> {
        let mut layout = std::collections::BTreeMap::new();
        for k in 0..self.config.stages {
            layout.insert(Self::alpha_name(k), vec![1]);
            layout.insert(Self::beta_name(k), vec![1]);
        }
        for k in 0..self.denoiser_count() {
            layout.extend(self.denoiser.weight_layout(&self.net_prefix(k))?);
        }
        Ok(layout)
    }

    /// Stage parameters implied by the stored `α`, `β` scalars.
    pub fn stage_params(&self, weights: &ModelWeights) -> Result<StageParams> {
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for k in 0..self.config.stages {
            alpha.push(weights.require(&Self::alpha_name(k))?.item());
            beta.push(weights.require(&Self::beta_name(k))?.item());
        }
        estimate_stage_params(&alpha, &beta)
    }

    /// Differentiable data step on the tape.
    pub fn data_step_on_tape(
        tape: &mut Tape,
        z: Var,
        y: Var,
        phi: Var,
        mu: Var,
        op: &Arc<SensingOperator>,
    ) -> Result<Var> {
        let pz = tape.project(z, Arc::clone(op))?;
        let r = tape.sub(y, pz)?;
        let denom = tape.add_scalar(phi, mu)?;
        let q = tape.div(r, denom)?;
        let back = tape.adjoint(q, Arc::clone(op))?;
        tape.add(z, back)
    }

    /// Unrolls every stage on `tape` and returns the handles.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        y: &Measurement,
        op: &SensingOperator,
        feature_mask: Option<&FeatureMask>,
    ) -> Result<UnfoldOutput> {
        if op.bands() != self.bands() {
            return Err(Error::dim(format!(
                "operator has {} bands, model was built for {}",
                op.bands(),
                self.bands()
            )));
        }
        let op = Arc::new(op.clone());
        let init = shift_back(y, &op)?;
        let yv = tape.constant(y.to_tensor());
        let phi = tape.constant(Tensor::new(vec![y.height(), y.width()], phi_diag(&op))?);
        let z0 = tape.constant(init.to_tensor());
        let mut z = z0;
        let mut stages = Vec::with_capacity(self.config.stages);
        let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
        for k in 0..self.config.stages {
            let alpha = bound.get(&Self::alpha_name(k))?;
            let beta = bound.get(&Self::beta_name(k))?;
            let mu = tape.softplus(alpha);
            let sigma = tape.softplus(beta);
            let x = Self::data_step_on_tape(tape, z, yv, phi, mu, &op)?;
            let scope = bound.scope(&self.net_prefix(k));
            z = self.denoiser.denoise(tape, x, sigma, op.mask(), &scope, feature_mask)?;
            stages.push((x, z));
            mus.push(mu);
            sigmas.push(sigma);
        }
        let output = tape.relu(z);
        Ok(UnfoldOutput {
            output,
            init: z0,
            stages,
            mu: mus,
            sigma: sigmas,
        })
    }

    /// Reconstructs a cube from a measurement; the result is nonnegative.
    pub fn reconstruct(
        &self,
        y: &Measurement,
        op: &SensingOperator,
        weights: &ModelWeights,
        feature_mask: Option<&FeatureMask>,
    ) -> Result<HsiCube> {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, y, op, feature_mask)?;
        HsiCube::from_tensor(tape.value(out.output))
    }
}
