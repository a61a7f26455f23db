use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_cube, FormatError};
use crate::cassi::HsiCube;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    /// Uniform offsets, reproducible for a given seed.
    Random {
        seed: u64,
    },
}

fn crop_cube(src: &HsiCube, top: usize, left: usize, crop: usize, bands: usize) -> HsiCube {
    let mut data = Vec::with_capacity(crop * crop * bands);
    for b in 0..bands {
        let plane = src.band(b);
        for r in top..top + crop {
            data.extend_from_slice(&plane[r * src.width() + left..r * src.width() + left + crop]);
        }
    }
    HsiCube::new(crop, crop, bands, data).expect("crop of a valid cube")
}

/// Loads every `*.hsic` cube in `dir` (sorted by file name) and crops each
/// to `crop×crop` spatially and its first `bands` bands.
pub fn ingest_dataset(dir: impl AsRef<Path>, crop: usize, bands: usize, mode: CropMode) -> Result<Vec<HsiCube>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsic"))
        .collect();
    paths.sort();
    let mut rng = match mode {
        CropMode::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CropMode::Center => None,
    };
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let cube = load_cube(&path)?;
        if crop == 0 || bands == 0 || cube.height() < crop || cube.width() < crop || cube.bands() < bands {
            return Err(FormatError::SceneTooSmall {
                name: path.display().to_string(),
                height: cube.height(),
                width: cube.width(),
                bands: cube.bands(),
                crop,
                want_bands: bands,
            }
            .into());
        }
        let (sh, sw) = (cube.height() - crop, cube.width() - crop);
        let (top, left) = match rng.as_mut() {
            Some(r) => (r.gen_range(0..=sh), r.gen_range(0..=sw)),
            None => (sh / 2, sw / 2),
        };
        out.push(crop_cube(&cube, top, left, crop, bands));
    }
    Ok(out)
}

/// Smooth synthetic scene in `[0, 1]`: a few Gaussian blobs, each with its
/// own spectral signature, over a gentle gradient.
pub fn toy_scene(height: usize, width: usize, bands: usize, seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Blob {
        r: f64,
        c: f64,
        radius: f64,
        spectrum: Vec<f64>,
    }
    let blobs: Vec<Blob> = (0..4)
        .map(|_| Blob {
            r: rng.gen_range(0.0..height as f64),
            c: rng.gen_range(0.0..width as f64),
            radius: rng.gen_range(0.15..0.35) * height.min(width) as f64,
            spectrum: (0..bands).map(|_| rng.gen_range(0.2..1.0)).collect(),
        })
        .collect();
    let tilt: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.0..0.2)).collect();
    let mut data = Vec::with_capacity(height * width * bands);
    for b in 0..bands {
        for r in 0..height {
            for c in 0..width {
                let mut v = tilt[b] * (r + c) as f64 / (height + width) as f64;
                for blob in &blobs {
                    let d2 = (r as f64 - blob.r).powi(2) + (c as f64 - blob.c).powi(2);
                    v += blob.spectrum[b] * (-d2 / (2.0 * blob.radius * blob.radius)).exp();
                }
                data.push(v);
            }
        }
    }
    let peak = data.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let data = data.into_iter().map(|v| v / peak).collect();
    HsiCube::new(height, width, bands, data).expect("finite synthetic scene")
}

/// Binary coded aperture with independent fair coin flips.
pub fn random_coded_mask(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..height * width)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_cube;

    fn write_scene(dir: &Path, name: &str, cube: &HsiCube) {
        save_cube(dir.join(name), cube).unwrap();
    }

    #[test]
    fn crops_and_band_selection() {
        let dir = tempfile::tempdir().unwrap();
        let scene = toy_scene(12, 10, 6, 1);
        write_scene(dir.path(), "a.hsic", &scene);
        let stored = load_cube(dir.path().join("a.hsic")).unwrap();

        let full = ingest_dataset(dir.path(), 10, 6, CropMode::Center).unwrap();
        assert_eq!(full[0].height(), 10);
        let narrow = ingest_dataset(dir.path(), 10, 4, CropMode::Center).unwrap();
        assert_eq!(narrow[0].bands(), 4);
        // center crop drops one row top and bottom
        for b in 0..4 {
            assert_eq!(narrow[0].band(b), &stored.band(b)[10..110]);
        }

        let r1 = ingest_dataset(dir.path(), 5, 2, CropMode::Random { seed: 9 }).unwrap();
        let r2 = ingest_dataset(dir.path(), 5, 2, CropMode::Random { seed: 9 }).unwrap();
        assert_eq!(r1, r2);
        let err = ingest_dataset(dir.path(), 11, 2, CropMode::Center).unwrap_err();
        assert!(err.to_string().contains("smaller than"));
    }

    #[test]
    fn identity_crop() {
        let dir = tempfile::tempdir().unwrap();
        let scene = toy_scene(8, 8, 3, 2);
        write_scene(dir.path(), "s.hsic", &scene);
        let stored = load_cube(dir.path().join("s.hsic")).unwrap();
        let got = ingest_dataset(dir.path(), 8, 3, CropMode::Random { seed: 1 }).unwrap();
        assert_eq!(got[0], stored);
    }

    #[test]
    fn toy_scene_is_deterministic_and_bounded() {
        let a = toy_scene(16, 16, 4, 5);
        assert_eq!(a, toy_scene(16, 16, 4, 5));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.data().iter().cloned().fold(0.0, f64::max), 1.0);
    }
}
