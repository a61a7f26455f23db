//! Coded-aperture snapshot sensing model.
//!
//! Band 0 is the reference (unshifted) band: band `b` lands on detector
//! columns `d*b .. d*b + W - 1`. Using an interior reference band only moves
//! every band by a common column offset. Reads outside the detector or the
//! scene are zero; nothing wraps around.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperspectral cube `H × W × N_λ`, stored band-major: each band plane is
/// contiguous and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::dim(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cube contains a non-finite value".into()));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    /// Interprets a `[bands, H, W]` tensor as a cube.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [b, h, w] => HsiCube::new(h, w, b, t.data().to_vec()),
            _ => Err(Error::dim(format!(
                "cube tensor must be [bands, H, W], got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.bands, self.height, self.width], self.data.clone())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f64) {
        self.data[(band * self.height + row) * self.width + col] = value;
    }

    /// One band plane, row-major.
    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    /// Replaces negative values by zero.
    pub fn clamp_nonnegative(&self) -> Self {
        HsiCube {
            data: self.data.iter().map(|v| v.max(0.0)).collect(),
            ..self.clone()
        }
    }
}

/// Detector image `H × W'` with `W' = W + d (N_λ - 1)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "measurement dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "measurement {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Measurement { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] => Measurement::new(h, w, t.data().to_vec()),
            _ => Err(Error::dim(format!(
                "measurement tensor must be [H, W'], got {:?}",
                t.shape()
            ))),
        }
    }
}

/// Coded mask plus dispersion: defines `Φ`, `Φᵀ` and `diag(ΦΦᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    height: usize,
    width: usize,
    bands: usize,
    shift: usize,
    mask: Vec<f64>,
}

impl SensingOperator {
    /// `mask` is `height × width`, row-major, values in `[0, 1]`.
    pub fn new(height: usize, width: usize, mask: Vec<f64>, shift: usize, bands: usize) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim(format!(
                "operator dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if mask.len() != height * width {
            return Err(Error::dim(format!(
                "mask must have {height}x{width} values, got {}",
                mask.len()
            )));
        }
        if let Some(m) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::arg(format!("mask values must lie in [0, 1], found {m}")));
        }
        Ok(SensingOperator {
            height,
            width,
            bands,
            shift,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    /// Detector width `W + d (N_λ - 1)`.
    pub fn detector_width(&self) -> usize {
        self.width + self.shift * (self.bands - 1)
    }

    /// Number of cube unknowns `H W N_λ`.
    pub fn cube_len(&self) -> usize {
        self.height * self.width * self.bands
    }

    fn check_cube(&self, cube: &HsiCube) -> Result<()> {
        if (cube.height, cube.width, cube.bands) != (self.height, self.width, self.bands) {
            return Err(Error::dim(format!(
                "cube is {}x{}x{} but the operator expects {}x{}x{}",
                cube.height, cube.width, cube.bands, self.height, self.width, self.bands
            )));
        }
        Ok(())
    }

    fn check_meas(&self, meas: &Measurement) -> Result<()> {
        if (meas.height, meas.width) != (self.height, self.detector_width()) {
            return Err(Error::dim(format!(
                "measurement is {}x{} but the operator expects {}x{}",
                meas.height,
                meas.width,
                self.height,
                self.detector_width()
            )));
        }
        Ok(())
    }

    /// `Φ x` on a band-major cube buffer.
    pub(crate) fn forward_raw(&self, cube: &[f64]) -> Vec<f64> {
        let (h, w, wd) = (self.height, self.width, self.detector_width());
        let mut y = vec![0.0; h * wd];
        for b in 0..self.bands {
            let off = self.shift * b;
            for r in 0..h {
                let src = &cube[(b * h + r) * w..(b * h + r + 1) * w];
                let m = &self.mask[r * w..(r + 1) * w];
                let dst = &mut y[r * wd + off..r * wd + off + w];
                for ((o, &v), &mv) in dst.iter_mut().zip(src).zip(m) {
                    *o += mv * v;
                }
            }
        }
        y
    }

    /// `Φᵀ y` on a row-major detector buffer.
    pub(crate) fn adjoint_raw(&self, meas: &[f64]) -> Vec<f64> {
        let (h, w, wd) = (self.height, self.width, self.detector_width());
        let mut x = vec![0.0; self.cube_len()];
        for b in 0..self.bands {
            let off = self.shift * b;
            for r in 0..h {
                let src = &meas[r * wd + off..r * wd + off + w];
                let m = &self.mask[r * w..(r + 1) * w];
                let dst = &mut x[(b * h + r) * w..(b * h + r + 1) * w];
                for ((o, &v), &mv) in dst.iter_mut().zip(src).zip(m) {
                    *o = mv * v;
                }
            }
        }
        x
    }
}

/// Noiseless measurement: masks every band, shears band `b` by `d*b`
/// columns and sums on the detector.
pub fn forward_project(cube: &HsiCube, op: &SensingOperator) -> Result<Measurement> {
    op.check_cube(cube)?;
    Measurement::new(op.height, op.detector_width(), op.forward_raw(&cube.data))
}

/// `Φᵀ y`: `F(r, x, b) = M(r, x) Y(r, x + d b)`.
pub fn adjoint_project(meas: &Measurement, op: &SensingOperator) -> Result<HsiCube> {
    op.check_meas(meas)?;
    Ok(HsiCube {
        height: op.height,
        width: op.width,
        bands: op.bands,
        data: op.adjoint_raw(&meas.data),
    })
}

/// Undoes the dispersion without unmasking: band `b` reads detector
/// columns `d*b .. d*b + W - 1`.
pub fn shift_back(meas: &Measurement, op: &SensingOperator) -> Result<HsiCube> {
    op.check_meas(meas)?;
    let (h, w, wd) = (op.height, op.width, op.detector_width());
    let mut data = Vec::with_capacity(op.cube_len());
    for b in 0..op.bands {
        let off = op.shift * b;
        for r in 0..h {
            data.extend_from_slice(&meas.data[r * wd + off..r * wd + off + w]);
        }
    }
    HsiCube::new(h, w, op.bands, data)
}

/// Diagonal of `ΦΦᵀ`: for each detector pixel, the sum of squared mask
/// values of every source pixel that lands on it. Row-major `H × W'`.
pub fn phi_diag(op: &SensingOperator) -> Vec<f64> {
    let (h, w, wd) = (op.height, op.width, op.detector_width());
    let mut phi = vec![0.0; h * wd];
    for b in 0..op.bands {
        let off = op.shift * b;
        for r in 0..h {
            for x in 0..w {
                let m = op.mask[r * w + x];
                phi[r * wd + off + x] += m * m;
            }
        }
    }
    phi
}

/// Largest `H W N_λ` accepted by [`build_dense_phi`].
pub const DENSE_LIMIT: usize = 4096;

/// Explicit `(H W') × (H W N_λ)` sensing matrix. Rows index detector pixels
/// row-major; columns index the band-major cube layout.
pub fn build_dense_phi(op: &SensingOperator) -> Result<DMatrix<f64>> {
    let n = op.cube_len();
    if n > DENSE_LIMIT {
        return Err(Error::ScaleGuard {
            size: n,
            limit: DENSE_LIMIT,
        });
    }
    let (h, w, wd) = (op.height, op.width, op.detector_width());
    let mut phi = DMatrix::zeros(h * wd, n);
    for b in 0..op.bands {
        for r in 0..h {
            for x in 0..w {
                let row = r * wd + x + op.shift * b;
                let col = (b * h + r) * w + x;
                phi[(row, col)] = op.mask[r * w + x];
            }
        }
    }
    Ok(phi)
}

/// Poisson shot noise at a given detector bit depth.
///
/// The measurement is scaled so its maximum maps to `2^bits - 1` counts, each
/// pixel is replaced by a Poisson draw with that mean, and the result is
/// scaled back.
pub fn add_shot_noise(meas: &Measurement, bits: u32, seed: u64) -> Result<Measurement> {
    if !(1..=16).contains(&bits) {
        return Err(Error::arg(format!("bit depth must be in [1, 16], got {bits}")));
    }
    if let Some(v) = meas.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::arg(format!(
            "shot noise needs nonnegative measurements, found {v}"
        )));
    }
    let peak = meas.data.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(meas.clone());
    }
    let scale = ((1u32 << bits) - 1) as f64 / peak;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = meas
        .data
        .iter()
        .map(|&v| {
            let lambda = v * scale;
            if lambda == 0.0 {
                0.0
            } else {
                let counts: f64 = Poisson::new(lambda).expect("positive finite rate").sample(&mut rng);
                counts / scale
            }
        })
        .collect();
    Measurement::new(meas.height, meas.width, data)
}
