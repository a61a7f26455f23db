use std::collections::HashSet;

use sha2::{Digest, Sha256};

use super::FormatError;
use crate::denoiser::NetConfig;
use crate::hqs::UnfoldConfig;
use crate::scan::CubeSpec;

/// Network profile read from `key=value` lines; `#` starts a comment.
/// Keys left out keep their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub stages: usize,
    pub share_weights: bool,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks: usize,
    pub bottleneck_blocks: usize,
    pub patch: usize,
    /// Cross-scan cube `(h, w, c)`.
    pub cube: (usize, usize, usize),
    pub state_size: usize,
    pub ffn_expansion: usize,
    pub masked: bool,
    pub mask_ratio: f64,
    pub mask_seed: u64,
}

impl Default for Profile {
    fn default() -> Self {
        let net = NetConfig::default();
        Profile {
            stages: 3,
            share_weights: true,
            base_channels: net.base_channels,
            levels: net.levels,
            blocks: net.blocks_per_level,
            bottleneck_blocks: net.bottleneck_blocks,
            patch: net.cube.patch,
            cube: (net.cube.h, net.cube.w, net.cube.c),
            state_size: net.state_size,
            ffn_expansion: net.ffn_expansion,
            masked: false,
            mask_ratio: 0.5,
            mask_seed: 0,
        }
    }
}

fn bad(line: usize, key: &str, value: &str) -> FormatError {
    FormatError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize, FormatError> {
    if !v.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad(line, key, v));
    }
    v.parse().map_err(|_| bad(line, key, v))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, FormatError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(line, key, v)),
    }
}

impl Profile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut p = Profile::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| FormatError::ConfigSyntax {
                line,
                msg: format!("expected key=value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(FormatError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            match key {
                "stages" => p.stages = parse_usize(line, key, value)?,
                "share_weights" => p.share_weights = parse_bool(line, key, value)?,
                "base_channels" => p.base_channels = parse_usize(line, key, value)?,
                "levels" => p.levels = parse_usize(line, key, value)?,
                "blocks" => p.blocks = parse_usize(line, key, value)?,
                "bottleneck_blocks" => p.bottleneck_blocks = parse_usize(line, key, value)?,
                "patch" => p.patch = parse_usize(line, key, value)?,
                "cube" => {
                    let parts: Vec<&str> = value.split('x').collect();
                    if parts.len() != 3 {
                        return Err(bad(line, key, value));
                    }
                    p.cube = (
                        parse_usize(line, key, parts[0])?,
                        parse_usize(line, key, parts[1])?,
                        parse_usize(line, key, parts[2])?,
                    );
                }
                "state_size" => p.state_size = parse_usize(line, key, value)?,
                "ffn_expansion" => p.ffn_expansion = parse_usize(line, key, value)?,
                "masked" => p.masked = parse_bool(line, key, value)?,
                "mask_ratio" => {
                    let r: f64 = value.parse().map_err(|_| bad(line, key, value))?;
                    if !(0.0..1.0).contains(&r) {
                        return Err(bad(line, key, value));
                    }
                    p.mask_ratio = r;
                }
                "mask_seed" => p.mask_seed = value.parse().map_err(|_| bad(line, key, value))?,
                _ => {
                    return Err(FormatError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(p)
    }

    /// Canonical text form; `parse(to_text())` reproduces the profile.
    pub fn to_text(&self) -> String {
        let (h, w, c) = self.cube;
        format!(
            "stages={}\nshare_weights={}\nbase_channels={}\nlevels={}\nblocks={}\nbottleneck_blocks={}\n\
             patch={}\ncube={h}x{w}x{c}\nstate_size={}\nffn_expansion={}\nmasked={}\nmask_ratio={}\nmask_seed={}\n",
            self.stages,
            self.share_weights,
            self.base_channels,
            self.levels,
            self.blocks,
            self.bottleneck_blocks,
            self.patch,
            self.state_size,
            self.ffn_expansion,
            self.masked,
            self.mask_ratio,
            self.mask_seed,
        )
    }

    /// SHA-256 of the canonical text, stored in weight files.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            base_channels: self.base_channels,
            levels: self.levels,
            blocks_per_level: self.blocks,
            bottleneck_blocks: self.bottleneck_blocks,
            cube: CubeSpec {
                patch: self.patch,
                h: self.cube.0,
                w: self.cube.1,
                c: self.cube.2,
            },
            state_size: self.state_size,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn unfold_config(&self) -> UnfoldConfig {
        UnfoldConfig {
            stages: self.stages,
            share_weights: self.share_weights,
            net: self.net_config(),
        }
    }
}
