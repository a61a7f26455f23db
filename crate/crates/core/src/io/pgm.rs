use std::path::Path;

use super::FormatError;
use crate::cassi::HsiCube;
use crate::error::Result;

/// Min-max maps a band onto `0..=255`; a constant band becomes all 128.
pub fn normalize_band(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(normalize_band(values));
    out
}

pub fn export_band(cube: &HsiCube, band: usize, path: impl AsRef<Path>) -> Result<()> {
    if band >= cube.bands() {
        return Err(FormatError::BandOutOfRange {
            band,
            bands: cube.bands(),
        }
        .into());
    }
    Ok(std::fs::write(
        path,
        encode_pgm(cube.band(band), cube.height(), cube.width()),
    )?)
}
