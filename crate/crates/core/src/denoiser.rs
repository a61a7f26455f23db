//! U-shaped denoiser built from spatial-spectral SSM blocks.
//!
//! Each block applies, in order:
//!
//! 1. `f + le_ssm(LN(f))`: four selective scans over the spatial sequence
//!    (row-major forward/reverse and 4×4-patch-local forward/reverse),
//!    summed and projected by a 1×1 map.
//! 2. `cs_ssm(f) = f + scan(LN(f))`: one scalar-token scan over the whole
//!    `C×H×W` tensor in spatial-spectral cube order.
//! 3. `gdffn(f) = f + FFN(LN(f))`: gated depthwise feed-forward.
//!
//! The network embeds `[x, mask, σ]` (1×1 fuse then 3×3 embed), runs an
//! encoder with stride-2 downsampling, a bottleneck, and a decoder with
//! nearest upsampling and skip fusion, and adds a 3×3 residual head to `x`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::autodiff::{softplus_inverse, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::masked::{apply_mask, FeatureMask};
use crate::scan::{CubeSpec, OrderCache, ScanOrder, SpatialOrders};
use crate::tensor::Tensor;
use crate::weights::{ModelWeights, Scope};

/// Architecture of one denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub bottleneck_blocks: usize,
    /// Local scan patch side and cross-scan cube dimensions.
    pub cube: CubeSpec,
    pub state_size: usize,
    pub ffn_expansion: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 28,
            levels: 2,
            blocks_per_level: 1,
            bottleneck_blocks: 1,
            cube: CubeSpec::default(),
            state_size: 16,
            ffn_expansion: 2,
        }
    }
}

/// Per-block settings at one U-net level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub cube: CubeSpec,
    pub state_size: usize,
    pub ffn_expansion: usize,
}

impl NetConfig {
    pub fn patch(&self) -> usize {
        self.cube.patch
    }

    pub fn block(&self, level: usize) -> BlockConfig {
        BlockConfig {
            channels: self.base_channels << level,
            cube: self.cube,
            state_size: self.state_size,
            ffn_expansion: self.ffn_expansion,
        }
    }

    /// Checks divisibility of `H×W` at every level.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.base_channels == 0 || self.state_size == 0 || self.ffn_expansion == 0 {
            return Err(Error::arg("channels, state size and expansion must be positive"));
        }
        let unit = (1usize << self.levels) * self.patch();
        if !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(Error::dim(format!(
                "input {height}x{width} must be divisible by 2^levels * patch = {unit}"
            )));
        }
        for level in 0..=self.levels {
            let b = self.block(level);
            self.cube.validate(height >> level, width >> level, b.channels)?;
        }
        Ok(())
    }
}

fn conv_init<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut R) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    Tensor::randn(&[c_out, c_in, k, k], gain / fan_in.sqrt(), rng)
}

fn add(w: &mut ModelWeights, prefix: &str, name: &str, t: Tensor) -> Result<()> {
    w.insert(format!("{prefix}{name}"), t)
}

/// Inserts freshly initialized local-enhanced scan weights.
pub fn init_le_ssm<R: Rng + ?Sized>(
    w: &mut ModelWeights,
    prefix: &str,
    channels: usize,
    state: usize,
    rng: &mut R,
) -> Result<()> {
    let c = channels;
    let std = 1.0 / (c as f64).sqrt();
    for dir in 0..4 {
        let p = format!("{prefix}dir{dir}.");
        add(w, &p, "w_delta", Tensor::randn(&[c, c], 0.1 * std, rng))?;
        let b_delta = (0..c).map(|_| softplus_inverse(rng.gen_range(0.01..0.1))).collect();
        add(w, &p, "b_delta", Tensor::vector(b_delta))?;
        add(w, &p, "w_b", Tensor::randn(&[state, c], std, rng))?;
        add(w, &p, "w_c", Tensor::randn(&[state, c], std, rng))?;
        let a_log = (0..c).flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln())).collect();
        add(w, &p, "a_log", Tensor::new(vec![c, state], a_log)?)?;
        add(w, &p, "d", Tensor::ones(&[c]))?;
    }
    add(w, prefix, "out.w", Tensor::randn(&[c, c], 0.5 * std, rng))?;
    add(w, prefix, "out.b", Tensor::zeros(&[c]))
}

/// Inserts freshly initialized cross-scan weights.
pub fn init_cs_ssm<R: Rng + ?Sized>(
    w: &mut ModelWeights,
    prefix: &str,
    channels: usize,
    state: usize,
    rng: &mut R,
) -> Result<()> {
    add(w, prefix, "norm.g", Tensor::ones(&[channels]))?;
    add(w, prefix, "norm.b", Tensor::zeros(&[channels]))?;
    add(w, prefix, "w_delta", Tensor::randn(&[1, 1], 0.1, rng))?;
    add(
        w,
        prefix,
        "b_delta",
        Tensor::vector(vec![softplus_inverse(rng.gen_range(0.01..0.1))]),
    )?;
    add(w, prefix, "w_b", Tensor::randn(&[state, 1], 0.5, rng))?;
    add(w, prefix, "b_b", Tensor::randn(&[state], 0.5, rng))?;
    add(w, prefix, "w_c", Tensor::randn(&[state, 1], 0.5, rng))?;
    add(w, prefix, "b_c", Tensor::randn(&[state], 0.5, rng))?;
    let a_log = (0..state).map(|n| ((n + 1) as f64).ln()).collect();
    add(w, prefix, "a_log", Tensor::new(vec![1, state], a_log)?)?;
    add(w, prefix, "d", Tensor::vector(vec![0.1]))
}

/// Inserts freshly initialized gated feed-forward weights.
pub fn init_gdffn<R: Rng + ?Sized>(
    w: &mut ModelWeights,
    prefix: &str,
    channels: usize,
    expansion: usize,
    rng: &mut R,
) -> Result<()> {
    let hidden = expansion * channels;
    add(w, prefix, "norm.g", Tensor::ones(&[channels]))?;
    add(w, prefix, "norm.b", Tensor::zeros(&[channels]))?;
    add(w, prefix, "in.w", conv_init(2 * hidden, channels, 1, 1.0, rng))?;
    add(w, prefix, "in.b", Tensor::zeros(&[2 * hidden]))?;
    add(w, prefix, "dw.w", conv_init(2 * hidden, 1, 3, 1.0, rng))?;
    add(w, prefix, "out.w", conv_init(channels, hidden, 1, 0.5, rng))?;
    add(w, prefix, "out.b", Tensor::zeros(&[channels]))
}

fn init_block<R: Rng + ?Sized>(w: &mut ModelWeights, prefix: &str, cfg: &BlockConfig, rng: &mut R) -> Result<()> {
    add(w, prefix, "norm.g", Tensor::ones(&[cfg.channels]))?;
    add(w, prefix, "norm.b", Tensor::zeros(&[cfg.channels]))?;
    init_le_ssm(w, &format!("{prefix}le."), cfg.channels, cfg.state_size, rng)?;
    init_cs_ssm(w, &format!("{prefix}cs."), cfg.channels, cfg.state_size, rng)?;
    init_gdffn(w, &format!("{prefix}ffn."), cfg.channels, cfg.ffn_expansion, rng)
}

fn conv_with_bias(tape: &mut Tape, x: Var, w: &Scope<'_>, name: &str, stride: usize) -> Result<Var> {
    let k = w.get(&format!("{name}.w"))?;
    let y = tape.conv2d(x, k, stride, Padding::Same)?;
    tape.channel_bias(y, w.get(&format!("{name}.b"))?)
}

/// `[x (N_λ), mask (N_λ copies), σ (1)]` → 1×1 fuse to `N_λ` → 3×3 embed
/// to `C` channels.
pub fn embed_with_mask(tape: &mut Tape, x: Var, mask: &[f64], sigma: Var, w: &Scope<'_>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("embedding input must be [bands, H, W], got {s:?}")));
    }
    let (bands, h, wd) = (s[0], s[1], s[2]);
    if mask.len() != h * wd {
        return Err(Error::dim(format!(
            "coded mask has {} values but the input is {h}x{wd}",
            mask.len()
        )));
    }
    let m = tape.constant(Tensor::new(vec![bands, h, wd], mask.repeat(bands))?);
    let sig = tape.broadcast(sigma, &[1, h, wd])?;
    let cat = tape.concat(&[x, m, sig])?;
    let fused = conv_with_bias(tape, cat, w, "fuse", 1)?;
    conv_with_bias(tape, fused, w, "conv", 1)
}

/// Local-enhanced spatial scan of a `[C, H, W]` feature; returns the
/// projected sum of the four directions without a residual.
pub fn le_ssm_forward(tape: &mut Tape, f: Var, w: &Scope<'_>, orders: &SpatialOrders) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("feature must be [C, H, W], got {s:?}")));
    }
    let (c, h, wd) = (s[0], s[1], s[2]);
    let x = tape.reshape(f, &[c, h * wd])?;
    let mut total: Option<Var> = None;
    for (dir, order) in orders.as_array().into_iter().enumerate() {
        let p = w.child(&format!("dir{dir}"));
        let xs = tape.gather_by_order(x, Arc::clone(order))?;
        let y = directional_scan(tape, xs, &p, None)?;
        let back = tape.gather_by_order(y, Arc::new(order.inverted()))?;
        total = Some(match total {
            None => back,
            Some(t) => tape.add(t, back)?,
        });
    }
    let total = total.expect("four directions");
    let proj = tape.matmul(w.get("out.w")?, total)?;
    let proj = tape.channel_bias(proj, w.get("out.b")?)?;
    tape.reshape(proj, &[c, h, wd])
}

/// Selective scan of a `[Ch, L]` sequence with projections read from `w`.
/// `bias` adds the optional `b_b` / `b_c` terms used by scalar tokens.
fn directional_scan(tape: &mut Tape, xs: Var, w: &Scope<'_>, bias: Option<(Var, Var)>) -> Result<Var> {
    let dt = tape.matmul(w.get("w_delta")?, xs)?;
    let dt = tape.channel_bias(dt, w.get("b_delta")?)?;
    let delta = tape.softplus(dt);
    let mut b = tape.matmul(w.get("w_b")?, xs)?;
    let mut c = tape.matmul(w.get("w_c")?, xs)?;
    if let Some((bb, bc)) = bias {
        b = tape.channel_bias(b, bb)?;
        c = tape.channel_bias(c, bc)?;
    }
    let a_pos = tape.exp(w.get("a_log")?);
    let a = tape.scale(a_pos, -1.0);
    tape.selective_scan(xs, delta, a, b, c, w.get("d")?)
}

/// Cross spatial-spectral scan: normalizes, flattens the whole tensor in
/// cube order, runs a scalar-token scan and adds the result to the input.
pub fn cs_ssm_forward(tape: &mut Tape, f: Var, w: &Scope<'_>, order: &Arc<ScanOrder>) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let n: usize = s.iter().product();
    if order.len() != n {
        return Err(Error::dim(format!(
            "cross order covers {} elements, feature {s:?} has {n}",
            order.len()
        )));
    }
    let normed = tape.layer_norm(f, w.get("norm.g")?, w.get("norm.b")?)?;
    let flat = tape.reshape(normed, &[1, n])?;
    let seq = tape.gather_by_order(flat, Arc::clone(order))?;
    let bias = (w.get("b_b")?, w.get("b_c")?);
    let y = directional_scan(tape, seq, w, Some(bias))?;
    let back = tape.gather_by_order(y, Arc::new(order.inverted()))?;
    let back = tape.reshape(back, &s)?;
    tape.add(f, back)
}

/// Gated depthwise feed-forward with an internal residual.
pub fn gdffn_forward(tape: &mut Tape, f: Var, w: &Scope<'_>) -> Result<Var> {
    let normed = tape.layer_norm(f, w.get("norm.g")?, w.get("norm.b")?)?;
    let hidden2 = conv_with_bias(tape, normed, w, "in", 1)?;
    let dw = tape.depthwise_conv2d(hidden2, w.get("dw.w")?, Padding::Same)?;
    let half = tape.shape(dw)[0] / 2;
    let gate = tape.narrow(dw, 0, half)?;
    let value = tape.narrow(dw, half, half)?;
    let gate = tape.gelu(gate);
    let gated = tape.mul(gate, value)?;
    let out = conv_with_bias(tape, gated, w, "out", 1)?;
    tape.add(f, out)
}

/// Intermediate values of one block, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    pub after_le: Var,
    pub after_cs: Var,
    pub output: Var,
}

/// Orders needed by a block at one resolution.
#[derive(Clone, Debug)]
pub struct LevelOrders {
    pub spatial: SpatialOrders,
    pub cross: Arc<ScanOrder>,
}

impl LevelOrders {
    pub fn build(cache: &OrderCache, channels: usize, height: usize, width: usize, cube: CubeSpec) -> Result<Self> {
        Ok(LevelOrders {
            spatial: cache.spatial(height, width, cube.patch)?,
            cross: cache.cross(height, width, channels, cube)?,
        })
    }
}

/// One spatial-spectral SSM block.
pub fn block_forward(tape: &mut Tape, f: Var, w: &Scope<'_>, orders: &LevelOrders) -> Result<BlockTrace> {
    let normed = tape.layer_norm(f, w.get("norm.g")?, w.get("norm.b")?)?;
    let le = le_ssm_forward(tape, normed, &w.child("le"), &orders.spatial)?;
    let after_le = tape.add(f, le)?;
    let after_cs = cs_ssm_forward(tape, after_le, &w.child("cs"), &orders.cross)?;
    let output = gdffn_forward(tape, after_cs, &w.child("ffn"))?;
    Ok(BlockTrace {
        input: f,
        after_le,
        after_cs,
        output,
    })
}

/// The denoiser for a fixed band count, with its scan-order cache.
pub struct Denoiser {
    config: NetConfig,
    bands: usize,
    orders: OrderCache,
}

impl Denoiser {
    pub fn new(config: NetConfig, bands: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::arg("band count must be positive"));
        }
        Ok(Denoiser {
            config,
            bands,
            orders: OrderCache::new(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn order_cache(&self) -> &OrderCache {
        &self.orders
    }

    /// Inserts all denoiser weights under `prefix`.
    pub fn init_weights<R: Rng + ?Sized>(&self, w: &mut ModelWeights, prefix: &str, rng: &mut R) -> Result<()> {
        let cfg = &self.config;
        let (b, c) = (self.bands, cfg.base_channels);
        add(w, prefix, "embed.fuse.w", conv_init(b, 2 * b + 1, 1, 1.0, rng))?;
        add(w, prefix, "embed.fuse.b", Tensor::zeros(&[b]))?;
        add(w, prefix, "embed.conv.w", conv_init(c, b, 3, 1.0, rng))?;
        add(w, prefix, "embed.conv.b", Tensor::zeros(&[c]))?;
        for level in 0..cfg.levels {
            let bc = cfg.block(level);
            for i in 0..cfg.blocks_per_level {
                init_block(w, &format!("{prefix}enc{level}.block{i}."), &bc, rng)?;
            }
            let ch = bc.channels;
            add(
                w,
                prefix,
                &format!("enc{level}.down.w"),
                conv_init(2 * ch, ch, 3, 1.0, rng),
            )?;
            add(w, prefix, &format!("enc{level}.down.b"), Tensor::zeros(&[2 * ch]))?;
        }
        let bottom = cfg.block(cfg.levels);
        for i in 0..cfg.bottleneck_blocks {
            init_block(w, &format!("{prefix}mid.block{i}."), &bottom, rng)?;
        }
        for level in (0..cfg.levels).rev() {
            let bc = cfg.block(level);
            let ch = bc.channels;
            add(
                w,
                prefix,
                &format!("dec{level}.up.w"),
                conv_init(ch, 2 * ch, 3, 1.0, rng),
            )?;
            add(w, prefix, &format!("dec{level}.up.b"), Tensor::zeros(&[ch]))?;
            add(
                w,
                prefix,
                &format!("dec{level}.fuse.w"),
                conv_init(ch, 2 * ch, 1, 1.0, rng),
            )?;
            add(w, prefix, &format!("dec{level}.fuse.b"), Tensor::zeros(&[ch]))?;
            for i in 0..cfg.blocks_per_level {
                init_block(w, &format!("{prefix}dec{level}.block{i}."), &bc, rng)?;
            }
        }
        add(w, prefix, "out.w", conv_init(b, c, 3, 0.1, rng))?;
        add(w, prefix, "out.b", Tensor::zeros(&[b]))
    }

    /// Names and shapes `init_weights` produces under `prefix`.
    pub fn weight_layout(&self, prefix: &str) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut w = ModelWeights::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        self.init_weights(&mut w, prefix, &mut rng)?;
        Ok(w.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect())
    }

    /// Residual denoising of a `[bands, H, W]` node at noise level `sigma`
    /// (a one-element node). `feature_mask`, when given, multiplies the
    /// embedded feature.
    pub fn denoise(
        &self,
        tape: &mut Tape,
        x: Var,
        sigma: Var,
        coded_mask: &[f64],
        w: &Scope<'_>,
        feature_mask: Option<&FeatureMask>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.bands {
            return Err(Error::dim(format!(
                "denoiser expects [{}, H, W], got {s:?}",
                self.bands
            )));
        }
        if !tape.value(sigma).all_finite() {
            return Err(Error::NonFinite("denoiser noise level".into()));
        }
        let (h, wd) = (s[1], s[2]);
        let cfg = &self.config;
        cfg.validate(h, wd)?;

        let mut f = embed_with_mask(tape, x, coded_mask, sigma, &w.child("embed"))?;
        if let Some(m) = feature_mask {
            f = apply_mask(tape, f, m)?;
        }

        let mut skips = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let bc = cfg.block(level);
            let orders = LevelOrders::build(&self.orders, bc.channels, h >> level, wd >> level, cfg.cube)?;
            for i in 0..cfg.blocks_per_level {
                f = block_forward(tape, f, &w.child(&format!("enc{level}.block{i}")), &orders)?.output;
            }
            skips.push(f);
            f = conv_with_bias(tape, f, w, &format!("enc{level}.down"), 2)?;
        }
        let bottom = cfg.block(cfg.levels);
        let orders = LevelOrders::build(
            &self.orders,
            bottom.channels,
            h >> cfg.levels,
            wd >> cfg.levels,
            cfg.cube,
        )?;
        for i in 0..cfg.bottleneck_blocks {
            f = block_forward(tape, f, &w.child(&format!("mid.block{i}")), &orders)?.output;
        }
        for level in (0..cfg.levels).rev() {
            let bc = cfg.block(level);
            let up = tape.upsample2(f)?;
            f = conv_with_bias(tape, up, w, &format!("dec{level}.up"), 1)?;
            let cat = tape.concat(&[f, skips[level]])?;
            f = conv_with_bias(tape, cat, w, &format!("dec{level}.fuse"), 1)?;
            let orders = LevelOrders::build(&self.orders, bc.channels, h >> level, wd >> level, cfg.cube)?;
            for i in 0..cfg.blocks_per_level {
                f = block_forward(tape, f, &w.child(&format!("dec{level}.block{i}")), &orders)?.output;
            }
        }
        let residual = conv_with_bias(tape, f, w, "out", 1)?;
        tape.add(x, residual)
    }
}
