use std::path::Path;

use super::{f32_le, u32_le, FormatError};
use crate::error::Result;
use crate::masked::FeatureMask;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CSMW";
pub const WEIGHTS_VERSION: u8 = 1;
/// Reserved entry holding the feature mask values, shape `[H, W]`.
pub const MASK_NAME: &str = "__feature_mask__";
/// Reserved entry `[zero_ratio, seed bits 0-15, 16-31, 32-47, 48-63]`.
pub const MASK_META_NAME: &str = "__feature_mask_meta__";

/// Everything persisted by training.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub config_digest: [u8; 32],
    pub weights: ModelWeights,
    pub mask: Option<FeatureMask>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_weights(file: &WeightsFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&file.config_digest);
    let count = file.weights.len() + if file.mask.is_some() { 2 } else { 0 };
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in file.weights.iter() {
        push_tensor(&mut out, name, t);
    }
    if let Some(mask) = &file.mask {
        let values =
            Tensor::new(vec![mask.height(), mask.width()], mask.values().to_vec()).expect("mask dims are consistent");
        push_tensor(&mut out, MASK_NAME, &values);
        let seed = mask.seed();
        let meta = vec![
            mask.zero_ratio(),
            (seed & 0xffff) as f64,
            ((seed >> 16) & 0xffff) as f64,
            ((seed >> 32) & 0xffff) as f64,
            (seed >> 48) as f64,
        ];
        push_tensor(&mut out, MASK_META_NAME, &Tensor::vector(meta));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
}

pub fn decode_weights(bytes: &[u8]) -> std::result::Result<WeightsFile, FormatError> {
    const HEADER: usize = 4 + 1 + 32 + 4;
    if bytes.len() >= 4 && &bytes[..4] != WEIGHTS_MAGIC {
        return Err(FormatError::BadWeightsMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes.len() < HEADER {
        return Err(FormatError::TruncatedHeader {
            needed: HEADER,
            found: bytes.len(),
        });
    }
    if bytes[4] != WEIGHTS_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(&bytes[5..37]);
    let count = u32_le(&bytes[37..41]) as usize;
    let mut r = Reader { bytes, pos: HEADER };
    let mut weights = ModelWeights::new();
    let mut mask_values = None;
    let mut mask_meta = None;
    for index in 0..count {
        let trunc = FormatError::TruncatedRecord { index };
        let len = r.take(2).ok_or(trunc.clone())?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = r.take(len).ok_or(trunc.clone())?;
        let name = std::str::from_utf8(name)
            .map_err(|_| FormatError::BadName(index))?
            .to_string();
        let rank = r.take(1).ok_or(trunc.clone())?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_le(r.take(4).ok_or(trunc.clone())?) as usize);
        }
        if shape.contains(&0) {
            return Err(FormatError::ZeroTensorDim(name));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::SizeOverflow)?;
        let payload = r
            .take(n.checked_mul(4).ok_or(FormatError::SizeOverflow)?)
            .ok_or(trunc)?;
        let mut data = Vec::with_capacity(n);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32_le(c);
            if !v.is_finite() {
                return Err(FormatError::NonFiniteValue(i));
            }
            data.push(f64::from(v));
        }
        let t = Tensor::new(shape, data).map_err(|_| FormatError::ZeroTensorDim(name.clone()))?;
        let slot = match name.as_str() {
            MASK_NAME => &mut mask_values,
            MASK_META_NAME => &mut mask_meta,
            _ => {
                if weights.contains(&name) {
                    return Err(FormatError::DuplicateName(name));
                }
                weights.insert(name.clone(), t).expect("checked for duplicates");
                continue;
            }
        };
        if slot.is_some() {
            return Err(FormatError::DuplicateName(name));
        }
        *slot = Some(t);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    let mask = match (mask_values, mask_meta) {
        (None, None) => None,
        (Some(v), Some(m)) => {
            if v.rank() != 2 || m.shape() != [5] {
                return Err(FormatError::BadMaskEntry("unexpected shapes".into()));
            }
            let md = m.data();
            let seed = md[1..]
                .iter()
                .enumerate()
                .try_fold(0u64, |acc, (i, &p)| {
                    ((0.0..=65535.0).contains(&p) && p.fract() == 0.0).then(|| acc | ((p as u64) << (16 * i)))
                })
                .ok_or_else(|| FormatError::BadMaskEntry("seed chunks are not 16-bit integers".into()))?;
            let (h, w) = (v.shape()[0], v.shape()[1]);
            Some(
                FeatureMask::from_parts(h, w, v.into_data(), md[0], seed)
                    .map_err(|e| FormatError::BadMaskEntry(e.to_string()))?,
            )
        }
        _ => {
            return Err(FormatError::BadMaskEntry(
                "values and metadata must appear together".into(),
            ))
        }
    };
    Ok(WeightsFile {
        config_digest,
        weights,
        mask,
    })
}

pub fn save_weights(path: impl AsRef<Path>, file: &WeightsFile) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(file))?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsFile> {
    let bytes = std::fs::read(path)?;
    Ok(decode_weights(&bytes)?)
}
