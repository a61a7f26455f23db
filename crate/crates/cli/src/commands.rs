use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use cassi_core::io::{
    export_band, ingest_dataset, load_cube, load_mask, load_measurement, load_weights, random_coded_mask, save_cube,
    save_mask, save_measurement, save_weights, toy_scene, CropMode, Profile, WeightsFile,
};
use cassi_core::scan::{cross_cube_order, global_order, local_patch_order, spectral_pixel_order, CubeSpec};
use cassi_core::{
    add_shot_noise, evaluate, forward_project, HsiCube, ModelWeights, SensingOperator, Tensor, TrainConfig,
    UnfoldingModel,
};

use crate::{
    CliError, Command, DumpScanOrderArgs, EvalArgs, ExportBandArgs, OrderKind, ReconstructArgs, SimulateArgs,
    SynthArgs, TrainArgs,
};

type CmdResult = Result<(), CliError>;

pub(crate) fn dispatch(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::ExportBand(a) => export(a),
        Command::DumpScanOrder(a) => dump_scan_order(a, out),
        Command::Synth(a) => synth(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn at(path: &Path) -> String {
    path.display().to_string()
}

fn read_profile(path: Option<&Path>) -> anyhow::Result<Profile> {
    match path {
        None => Ok(Profile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| at(p))?;
            Profile::parse(&text).with_context(|| at(p))
        }
    }
}

fn operator(mask_path: &Path, d: usize, bands: usize) -> anyhow::Result<SensingOperator> {
    let (h, w, mask) = load_mask(mask_path).with_context(|| at(mask_path))?;
    Ok(SensingOperator::new(h, w, mask, d, bands)?)
}

fn write_out(out: &mut dyn Write, text: &str) -> CmdResult {
    out.write_all(text.as_bytes()).context("writing to standard output")?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let cube = load_cube(&a.cube).with_context(|| at(&a.cube))?;
    let op = operator(&a.mask, a.d, cube.bands())?;
    let mut y = forward_project(&cube, &op)?;
    if let Some(bits) = a.noise_bits {
        y = add_shot_noise(&y, bits, a.seed)?;
    }
    save_measurement(&a.out, &y).with_context(|| at(&a.out))?;
    Ok(())
}

/// `W' = W + d(N - 1)` solved for `N`.
fn infer_bands(meas_width: usize, width: usize, d: usize) -> Result<usize, CliError> {
    if meas_width < width {
        return Err(CliError::Runtime(anyhow!(
            "measurement is {meas_width} wide but the mask is {width} wide"
        )));
    }
    let extra = meas_width - width;
    if d == 0 {
        return Err(usage("--bands is required when --d is 0"));
    }
    if !extra.is_multiple_of(d) {
        return Err(CliError::Runtime(anyhow!(
            "measurement width {meas_width} is not mask width {width} plus a multiple of d={d}"
        )));
    }
    Ok(extra / d + 1)
}

fn reconstruct(a: ReconstructArgs) -> CmdResult {
    let mut profile = read_profile(a.config.as_deref())?;
    if let Some(k) = a.stages {
        profile.stages = k;
    }
    let y = load_measurement(&a.meas).with_context(|| at(&a.meas))?;
    let (h, w, mask) = load_mask(&a.mask).with_context(|| at(&a.mask))?;
    if y.height() != h {
        return Err(CliError::Runtime(anyhow!(
            "measurement has {} rows but the mask has {h}",
            y.height()
        )));
    }
    let bands = match a.bands {
        Some(0) => return Err(usage("--bands must be positive")),
        Some(b) => b,
        None => infer_bands(y.width(), w, a.d)?,
    };
    let op = SensingOperator::new(h, w, mask, a.d, bands)?;
    if op.detector_width() != y.width() {
        return Err(CliError::Runtime(anyhow!(
            "measurement is {} wide; {bands} bands at d={} need {}",
            y.width(),
            a.d,
            op.detector_width()
        )));
    }
    let model = UnfoldingModel::new(profile.unfold_config(), bands)?;
    let (weights, feature_mask) = match &a.weights {
        Some(p) => {
            let file = load_weights(p).with_context(|| at(p))?;
            if file.config_digest != profile.digest() {
                return Err(CliError::Runtime(anyhow!(
                    "{}: weights were trained with a different network profile",
                    at(p)
                )));
            }
            file.weights
                .check_layout(&model.weight_layout()?)
                .with_context(|| at(p))?;
            (file.weights, file.mask)
        }
        None => (identity_weights(&model)?, None),
    };
    let rec = model.reconstruct(&y, &op, &weights, feature_mask.as_ref())?;
    save_cube(&a.out, &rec).with_context(|| at(&a.out))?;
    Ok(())
}

/// Fresh weights with every residual head zeroed, so each denoiser passes
/// its input through unchanged.
fn identity_weights(model: &UnfoldingModel) -> anyhow::Result<ModelWeights> {
    let mut w = model.init_weights(0)?;
    for k in 0..model.config().stages {
        let name = format!("{}out.w", model.net_prefix(k));
        let shape = w.require(&name)?.shape().to_vec();
        w.set(&name, Tensor::zeros(&shape))?;
    }
    Ok(w)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let profile = read_profile(a.config.as_deref())?;
    let mut cubes: Vec<HsiCube> = Vec::new();
    for p in &a.scenes {
        cubes.push(load_cube(p).with_context(|| at(p))?);
    }
    if let Some(dir) = &a.data {
        let (crop, bands) = match (a.crop, a.bands) {
            (Some(c), Some(b)) => (c, b),
            _ => return Err(usage("--data needs --crop and --bands")),
        };
        let mode = match a.crop_seed {
            Some(seed) => CropMode::Random { seed },
            None => CropMode::Center,
        };
        cubes.extend(ingest_dataset(dir, crop, bands, mode).with_context(|| at(dir))?);
    }
    if cubes.is_empty() {
        return Err(usage("no training scenes: pass --scene or --data"));
    }
    let (h, w, bands) = (cubes[0].height(), cubes[0].width(), cubes[0].bands());
    if let Some(c) = cubes
        .iter()
        .find(|c| (c.height(), c.width(), c.bands()) != (h, w, bands))
    {
        return Err(CliError::Runtime(anyhow!(
            "training scenes differ in size: {h}x{w}x{bands} and {}x{}x{}",
            c.height(),
            c.width(),
            c.bands()
        )));
    }
    let op = operator(&a.mask, a.d, bands)?;
    if (op.height(), op.width()) != (h, w) {
        return Err(CliError::Runtime(anyhow!(
            "mask is {}x{} but scenes are {h}x{w}",
            op.height(),
            op.width()
        )));
    }
    let samples: Vec<_> = cubes
        .into_iter()
        .map(|cube| cassi_core::masked::TrainSample { cube, op: op.clone() })
        .collect();
    let cfg = TrainConfig {
        learning_rate: a.lr,
        steps: a.steps,
        batch_size: a.batch,
        masked: profile.masked,
        zero_ratio: profile.mask_ratio,
        mask_seed: profile.mask_seed,
        noise_bits: a.noise_bits,
        noise_seed: a.noise_seed,
        grad_clip: (!a.no_clip).then_some(a.clip),
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let model = UnfoldingModel::new(profile.unfold_config(), bands)?;
    let mut weights = model.init_weights(a.seed)?;
    let report = cassi_core::masked::train(&model, &mut weights, &samples, &cfg)?;
    if let Some(p) = &a.log {
        let mut text = String::from("step loss grad_norm\n");
        for (i, (l, g)) in report.losses.iter().zip(&report.grad_norms).enumerate() {
            text.push_str(&format!("{i} {l:e} {g:e}\n"));
        }
        std::fs::write(p, text).with_context(|| at(p))?;
    }
    let file = WeightsFile {
        config_digest: profile.digest(),
        weights,
        mask: report.mask.clone(),
    };
    save_weights(&a.out, &file).with_context(|| at(&a.out))?;
    let mut summary = format!("steps={}", report.losses.len());
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        summary.push_str(&format!(" loss_first={first:e} loss_last={last:e}"));
    }
    if let Some(m) = &report.mask {
        summary.push_str(&format!(" mask_digest={}", m.digest()));
    }
    summary.push('\n');
    write_out(out, &summary)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    if let Some(r) = a.data_range {
        if !(r > 0.0 && r.is_finite()) {
            return Err(usage(format!("--data-range must be positive, got {r}")));
        }
    }
    let reference = load_cube(&a.reference).with_context(|| at(&a.reference))?;
    let test = load_cube(&a.test).with_context(|| at(&a.test))?;
    let report = evaluate(&reference, &test, a.data_range)?;
    let text = if a.table {
        report.to_table()
    } else {
        report.to_records()
    };
    write_out(out, &text)
}

fn export(a: ExportBandArgs) -> CmdResult {
    let cube = load_cube(&a.cube).with_context(|| at(&a.cube))?;
    export_band(&cube, a.band, &a.out).with_context(|| at(&a.out))?;
    Ok(())
}

fn parse_cube(s: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--cube must look like 2x2x4, got {s:?}")))?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(usage(format!("--cube must look like 2x2x4, got {s:?}"))),
    }
}

fn dump_scan_order(a: DumpScanOrderArgs, out: &mut dyn Write) -> CmdResult {
    let (h, w, c) = parse_cube(&a.cube)?;
    let mut order = match a.order {
        OrderKind::Global => global_order(a.height, a.width, a.reverse),
        OrderKind::Local => local_patch_order(a.height, a.width, a.patch, a.reverse)?,
        OrderKind::Cross => {
            let spec = CubeSpec {
                patch: a.patch,
                h,
                w,
                c,
            };
            cross_cube_order(a.height, a.width, a.channels, spec)?
        }
        OrderKind::Spectral => spectral_pixel_order(a.height, a.width, a.channels, a.patch)?,
    };
    if a.reverse && matches!(a.order, OrderKind::Cross | OrderKind::Spectral) {
        let mut f = order.forward().to_vec();
        f.reverse();
        order = cassi_core::ScanOrder::from_forward(f, order.descriptor().clone())?;
    }
    let idx = if a.inverse { order.inverse() } else { order.forward() };
    let mut text = String::with_capacity(idx.len() * 6);
    for i in idx {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    write_out(out, &text)
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.height == 0 || a.width == 0 || a.bands == 0 {
        return Err(usage("--height, --width and --bands must be positive"));
    }
    let cube = toy_scene(a.height, a.width, a.bands, a.seed);
    save_cube(&a.out_cube, &cube).with_context(|| at(&a.out_cube))?;
    let mask = random_coded_mask(a.height, a.width, a.mask_seed);
    save_mask(&a.out_mask, a.height, a.width, &mask).with_context(|| at(&a.out_mask))?;
    Ok(())
}
