//! PSNR and Gaussian-window SSIM.

use crate::cassi::HsiCube;
use crate::error::{Error, Result};

/// Reported when the two inputs are identical.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10·log10(range² / MSE)`, or [`PSNR_CAP`] when the inputs are equal.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("psnr", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::dim("psnr of empty inputs"));
    }
    if !(data_range > 0.0) {
        return Err(Error::arg(format!("data range must be positive, got {data_range}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

// Separable weighted mean over every fully contained window.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for x in 0..ow {
            rows[r * ow + x] = (0..k).map(|j| taps[j] * img[r * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for x in 0..ow {
            out[r * ow + x] = (0..k).map(|i| taps[i] * rows[(r + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of an 11×11 Gaussian window
/// (σ = 1.5), with population (not sample) covariances.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, data_range: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != height * width {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::arg(format!("data range must be positive, got {data_range}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mx = filter_valid(a, height, width, &taps);
    let my = filter_valid(b, height, width, &taps);
    let mxx = filter_valid(&prod(a, a), height, width, &taps);
    let myy = filter_valid(&prod(b, b), height, width, &taps);
    let mxy = filter_valid(&prod(a, b), height, width, &taps);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| ssim_pixel(mx[i], my[i], mxx[i], myy[i], mxy[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

/// Local SSIM from windowed first and second moments.
pub fn ssim_pixel(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64, c1: f64, c2: f64) -> f64 {
    let vx = mxx - mx * mx;
    let vy = myy - my * my;
    let cxy = mxy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Per-band quality of a test cube against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub data_range: f64,
}

impl MetricReport {
    /// `key=value` lines, one per quantity.
    pub fn to_records(&self) -> String {
        let mut s = format!(
            "psnr_mean={:.6} ssim_mean={:.6} data_range={:.6}\n",
            self.mean_psnr, self.mean_ssim, self.data_range
        );
        for (b, (p, q)) in self.per_band_psnr.iter().zip(&self.per_band_ssim).enumerate() {
            s.push_str(&format!("band={b} psnr={p:.6} ssim={q:.6}\n"));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("band      psnr     ssim\n");
        for (b, (p, q)) in self.per_band_psnr.iter().zip(&self.per_band_ssim).enumerate() {
            s.push_str(&format!("{b:>4} {p:>9.4} {q:>8.5}\n"));
        }
        s.push_str(&format!("mean {:>9.4} {:>8.5}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

/// Per-band PSNR and SSIM of `test` against `reference`, averaged over
/// bands. The data range defaults to the reference maximum.
pub fn evaluate(reference: &HsiCube, test: &HsiCube, data_range: Option<f64>) -> Result<MetricReport> {
    let dims = |c: &HsiCube| [c.bands(), c.height(), c.width()];
    if dims(reference) != dims(test) {
        return Err(Error::shape("evaluate", &dims(reference), &dims(test)));
    }
    let range = match data_range {
        Some(r) => r,
        None => reference.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    if !(range > 0.0) {
        return Err(Error::arg(format!(
            "data range must be positive, got {range}; pass an explicit range"
        )));
    }
    let (h, w) = (reference.height(), reference.width());
    let mut per_band_psnr = Vec::with_capacity(reference.bands());
    let mut per_band_ssim = Vec::with_capacity(reference.bands());
    for b in 0..reference.bands() {
        per_band_psnr.push(psnr(reference.band(b), test.band(b), range)?);
        per_band_ssim.push(ssim(reference.band(b), test.band(b), h, w, range)?);
    }
    let n = reference.bands() as f64;
    Ok(MetricReport {
        mean_psnr: per_band_psnr.iter().sum::<f64>() / n,
        mean_ssim: per_band_ssim.iter().sum::<f64>() / n,
        per_band_psnr,
        per_band_ssim,
        data_range: range,
    })
}
