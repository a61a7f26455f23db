//! On-disk formats: cube/mask/measurement containers, weight files, PGM
//! band export, network profiles and dataset ingestion.
//!
//! Values are `f64` in memory and little-endian `f32` on disk; the
//! narrowing conversion rounds to nearest, ties to even.

mod cube_file;
mod dataset;
mod pgm;
mod profile;
mod weights_file;

pub use cube_file::{
    decode_cube_file, encode_cube_file, load_cube, load_mask, load_measurement, save_cube, save_mask, save_measurement,
    CubeFile, CubeKind, CUBE_MAGIC, CUBE_VERSION, HEADER_LEN,
};
pub use dataset::{ingest_dataset, random_coded_mask, toy_scene, CropMode};
pub use pgm::{encode_pgm, export_band, normalize_band};
pub use profile::Profile;
pub use weights_file::{
    decode_weights, encode_weights, load_weights, save_weights, WeightsFile, MASK_META_NAME, MASK_NAME, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

/// Malformed file contents. Each variant renders a distinct diagnostic.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("not a HSIC file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("not a CSMW weights file (magic {0:?})")]
    BadWeightsMagic([u8; 4]),
    #[error("truncated header: {found} of {needed} bytes")]
    TruncatedHeader { needed: usize, found: usize },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown kind byte {0}")]
    UnknownKind(u8),
    #[error("kind mismatch: expected {expected}, file holds {found}")]
    KindMismatch { expected: CubeKind, found: CubeKind },
    #[error("zero dimension in header ({height}x{width}x{bands})")]
    ZeroDimension { height: u32, width: u32, bands: u32 },
    #[error("{kind} files must have exactly one band, header says {bands}")]
    SingleBandRequired { kind: CubeKind, bands: u32 },
    #[error("header dimensions overflow the addressable size")]
    SizeOverflow,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at payload index {0}")]
    NonFiniteValue(usize),
    #[error("mask value {value} at index {index} outside [0, 1]")]
    MaskRange { index: usize, value: f32 },
    #[error("truncated tensor record {index}")]
    TruncatedRecord { index: usize },
    #[error("tensor name in record {0} is not UTF-8")]
    BadName(usize),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} has a zero dimension")]
    ZeroTensorDim(String),
    #[error("reserved mask entries are malformed: {0}")]
    BadMaskEntry(String),
    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("config line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("PGM export: band {band} out of range for {bands} bands")]
    BandOutOfRange { band: usize, bands: usize },
    #[error("scene {name} is {height}x{width}x{bands}, smaller than the requested {crop}x{crop}x{want_bands} crop")]
    SceneTooSmall {
        name: String,
        height: usize,
        width: usize,
        bands: usize,
        crop: usize,
        want_bands: usize,
    },
}

fn f32_le(bytes: &[u8]) -> f32 {
    f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

fn u32_le(bytes: &[u8]) -> u32 {
    u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}
