use std::fmt;
use std::path::Path;

use super::{f32_le, u32_le, FormatError};
use crate::cassi::{HsiCube, Measurement};
use crate::error::Result;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u8 = 1;
/// Magic, version, kind and three `u32` dimensions.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeKind {
    Cube,
    Mask,
    Measurement,
}

impl CubeKind {
    pub fn byte(self) -> u8 {
        match self {
            CubeKind::Cube => 0,
            CubeKind::Mask => 1,
            CubeKind::Measurement => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CubeKind::Cube),
            1 => Some(CubeKind::Mask),
            2 => Some(CubeKind::Measurement),
            _ => None,
        }
    }
}

impl fmt::Display for CubeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CubeKind::Cube => "cube",
            CubeKind::Mask => "mask",
            CubeKind::Measurement => "measurement",
        })
    }
}

/// Decoded container, values widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeFile {
    pub kind: CubeKind,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band-major, row-major within a band.
    pub data: Vec<f64>,
}

pub fn encode_cube_file(kind: CubeKind, height: usize, width: usize, bands: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), height * width * bands, "payload size");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.push(CUBE_VERSION);
    out.push(kind.byte());
    for d in [height, width, bands] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses and validates a container. With `expected`, the kind byte must
/// match.
pub fn decode_cube_file(bytes: &[u8], expected: Option<CubeKind>) -> std::result::Result<CubeFile, FormatError> {
    if bytes.len() >= 4 && &bytes[..4] != CUBE_MAGIC {
        return Err(FormatError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 4 {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            if m[..bytes.len()] != CUBE_MAGIC[..bytes.len()] {
                return Err(FormatError::BadMagic(m));
            }
        }
        return Err(FormatError::TruncatedHeader {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != CUBE_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let kind = CubeKind::from_byte(bytes[5]).ok_or(FormatError::UnknownKind(bytes[5]))?;
    if let Some(want) = expected {
        if want != kind {
            return Err(FormatError::KindMismatch {
                expected: want,
                found: kind,
            });
        }
    }
    let (h, w, b) = (u32_le(&bytes[6..]), u32_le(&bytes[10..]), u32_le(&bytes[14..]));
    if h == 0 || w == 0 || b == 0 {
        return Err(FormatError::ZeroDimension {
            height: h,
            width: w,
            bands: b,
        });
    }
    if kind != CubeKind::Cube && b != 1 {
        return Err(FormatError::SingleBandRequired { kind, bands: b });
    }
    let count = (h as usize)
        .checked_mul(w as usize)
        .and_then(|v| v.checked_mul(b as usize))
        .ok_or(FormatError::SizeOverflow)?;
    let expected_len = count.checked_mul(4).ok_or(FormatError::SizeOverflow)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected_len {
        return Err(FormatError::TruncatedPayload {
            expected: expected_len,
            found: payload.len(),
        });
    }
    if payload.len() > expected_len {
        return Err(FormatError::TrailingBytes(payload.len() - expected_len));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32_le(chunk);
        if !v.is_finite() {
            return Err(FormatError::NonFiniteValue(i));
        }
        if kind == CubeKind::Mask && !(0.0..=1.0).contains(&v) {
            return Err(FormatError::MaskRange { index: i, value: v });
        }
        data.push(f64::from(v));
    }
    Ok(CubeFile {
        kind,
        height: h as usize,
        width: w as usize,
        bands: b as usize,
        data,
    })
}

fn read_kind(path: &Path, kind: CubeKind) -> Result<CubeFile> {
    let bytes = std::fs::read(path)?;
    Ok(decode_cube_file(&bytes, Some(kind))?)
}

pub fn save_cube(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    let bytes = encode_cube_file(CubeKind::Cube, cube.height(), cube.width(), cube.bands(), cube.data());
    Ok(std::fs::write(path, bytes)?)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let f = read_kind(path.as_ref(), CubeKind::Cube)?;
    HsiCube::new(f.height, f.width, f.bands, f.data)
}

pub fn save_mask(path: impl AsRef<Path>, height: usize, width: usize, mask: &[f64]) -> Result<()> {
    if mask.len() != height * width {
        return Err(crate::error::Error::dim(format!(
            "mask {height}x{width} needs {} values, got {}",
            height * width,
            mask.len()
        )));
    }
    Ok(std::fs::write(
        path,
        encode_cube_file(CubeKind::Mask, height, width, 1, mask),
    )?)
}

/// Returns `(height, width, values)`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let f = read_kind(path.as_ref(), CubeKind::Mask)?;
    Ok((f.height, f.width, f.data))
}

pub fn save_measurement(path: impl AsRef<Path>, meas: &Measurement) -> Result<()> {
    let bytes = encode_cube_file(CubeKind::Measurement, meas.height(), meas.width(), 1, meas.data());
    Ok(std::fs::write(path, bytes)?)
}

pub fn load_measurement(path: impl AsRef<Path>) -> Result<Measurement> {
    let f = read_kind(path.as_ref(), CubeKind::Measurement)?;
    Measurement::new(f.height, f.width, f.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let data: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 * 0.25).collect();
        encode_cube_file(CubeKind::Cube, 2, 3, 2, &data)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample();
        let f = decode_cube_file(&bytes, None).unwrap();
        assert_eq!(f.kind, CubeKind::Cube);
        assert_eq!((f.height, f.width, f.bands), (2, 3, 2));
        let again = encode_cube_file(f.kind, f.height, f.width, f.bands, &f.data);
        assert_eq!(again, bytes);
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // 1 + 2^-24 is halfway between two f32 values and ties to 1.0
        let x = 1.0 + 2f64.powi(-24);
        let bytes = encode_cube_file(CubeKind::Cube, 1, 1, 1, &[x]);
        assert_eq!(decode_cube_file(&bytes, None).unwrap().data[0], 1.0);
    }

    #[test]
    fn header_faults_are_distinct() {
        let good = sample();
        let mut msgs = Vec::new();

        let mut b = good.clone();
        b[0] = b'X';
        msgs.push(decode_cube_file(&b, None).unwrap_err().to_string());
        msgs.push(decode_cube_file(&good[..10], None).unwrap_err().to_string());
        let mut b = good.clone();
        b[4] = 9;
        msgs.push(decode_cube_file(&b, None).unwrap_err().to_string());
        let mut b = good.clone();
        b[5] = 7;
        msgs.push(decode_cube_file(&b, None).unwrap_err().to_string());
        msgs.push(decode_cube_file(&good, Some(CubeKind::Mask)).unwrap_err().to_string());
        let mut b = good.clone();
        b[6..10].copy_from_slice(&0u32.to_le_bytes());
        msgs.push(decode_cube_file(&b, None).unwrap_err().to_string());
        msgs.push(decode_cube_file(&good[..good.len() - 1], None).unwrap_err().to_string());
        let mut b = good.clone();
        b.push(0);
        msgs.push(decode_cube_file(&b, None).unwrap_err().to_string());

        assert!(msgs[0].contains("not a HSIC file"));
        assert!(msgs[6].contains("truncated payload"));
        let mut uniq = msgs.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), msgs.len(), "{msgs:#?}");
    }
}
