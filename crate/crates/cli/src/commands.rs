//! Subcommand implementations. Each one writes `effective_config.json`
//! next to its outputs so a directory records how it was produced.

use std::fs;
use std::path::{Path, PathBuf};

use avatarbg_core::compositor::{build_condition, mask_sigma_for};
use avatarbg_core::dataset::{generate_to_dir, DiskDataset, SampleSource};
use avatarbg_core::maskembed::{joint_mask, pack_mask, MaskMode};
use avatarbg_core::metrics::{region_report, write_metric_csv, MetricRow};
use avatarbg_core::sampler::{sample, write_png_frames};
use avatarbg_core::synthdata::{validate_dims, Degradation, SceneConfig};
use avatarbg_core::tensorio::{read_video, write_video};
use avatarbg_core::trainer::{self, build_conditioning, load_checkpoint, LossMasking, TrainConfig};
use avatarbg_core::Video;
use ndarray::s;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::{EvalArgs, GenDataArgs, InspectArgs, LossMaskingArg, SampleArgs, TrainArgs};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
/// Written by `train`; remembers the dataset a checkpoint was trained on.
pub const RUN_FILE: &str = "run.json";

/// Reads a JSON argument given inline (`{...}`) or as a file path.
fn json_arg<T: serde::de::DeserializeOwned>(what: &str, arg: &str) -> CliResult<T> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(format!("{what} file {arg} not found")),
            _ => CliError::Usage(format!("cannot read {what} file {arg}: {e}")),
        })?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid {what} JSON: {e}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(avatarbg_core::Error::Io { path: dir.into(), source: e }))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(avatarbg_core::Error::from)? + "\n";
    fs::write(path, text).map_err(|e| CliError::Core(avatarbg_core::Error::Io { path: path.into(), source: e }))
}

fn open_dataset(dir: &Path) -> CliResult<DiskDataset> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!("dataset directory {} not found", dir.display())));
    }
    Ok(DiskDataset::open(dir)?)
}

fn position(data: &DiskDataset, id: &str) -> CliResult<usize> {
    data.position(id)
        .ok_or_else(|| CliError::Missing(format!("sample {id} not found in {}", data.dir.display())))
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let (height, width) = args.size;
    if args.frames == 0 || args.frames % 4 != 0 {
        return Err(CliError::Usage(format!("--frames must be a positive multiple of 4, got {}", args.frames)));
    }
    validate_dims(args.frames + 1, height, width).map_err(|e| CliError::Usage(e.to_string()))?;
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    let degradation = match &args.degradation {
        Some(arg) => json_arg::<Degradation>("degradation", arg)?,
        None => Degradation::default(),
    };
    degradation.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut scene = SceneConfig::new(args.frames + 1, height, width);
    if let Some(f) = args.dynamic_background_fraction {
        scene.dynamic_background_fraction = f;
    }
    scene.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let manifest = generate_to_dir(&args.out, args.seed, args.scenes, &scene, &degradation)?;
    write_json(
        &args.out.join(EFFECTIVE_CONFIG),
        &json!({
            "command": "gen-data",
            "scenes": args.scenes,
            "motion_frames": args.frames,
            "seed": args.seed,
            "scene": scene,
            "degradation": degradation,
        }),
    )?;
    println!(
        "wrote {} scenes ({} tensor files) to {}",
        args.scenes,
        manifest.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(arg) => json_arg::<TrainConfig>("training config", arg)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.workers {
        config.workers = Some(v);
    }
    if let Some(v) = args.loss_masking {
        config.loss_masking = match v {
            LossMaskingArg::Uniform => LossMasking::Uniform,
            LossMaskingArg::BodyWeighted => LossMasking::BodyWeighted,
        };
    }
    config.ablation.no_avatar_condition |= args.no_avatar_condition;
    config.ablation.no_mask_strategy |= args.no_mask_strategy;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = train_config(args)?;
    let data = open_dataset(&args.data)?;
    let every = args.log_every;
    let steps = config.steps;
    let outcome = trainer::train(&data, &config, |r| {
        if every > 0 && (r.step % every == 0 || r.step + 1 == steps) {
            eprintln!("step {:>6}/{steps} loss {:.6} ema {:.6}", r.step + 1, r.loss, r.ema_loss);
        }
    })?;
    create_dir(&args.out)?;
    trainer::write_run(&args.out, &config, &outcome)?;
    let data_dir = fs::canonicalize(&args.data).unwrap_or_else(|_| args.data.clone());
    let final_ema = outcome.final_ema().unwrap_or(f64::NAN);
    write_json(
        &args.out.join(RUN_FILE),
        &json!({
            "data": data_dir,
            "ablation": config.ablation.label(),
            "steps_completed": outcome.log.len(),
            "final_ema_loss": final_ema,
        }),
    )?;
    println!("trained {} steps ({}), final EMA loss {final_ema:.6}", outcome.log.len(), config.ablation.label());
    Ok(())
}

fn checkpoint_data_dir(ckpt: &Path) -> CliResult<PathBuf> {
    let path = ckpt.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|_| {
        CliError::Missing(format!("no --data given and {} does not name a dataset", path.display()))
    })?;
    let run: Value = serde_json::from_str(&text).map_err(|e| CliError::Contract(format!("{}: {e}", path.display())))?;
    run.get("data")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Contract(format!("{} lacks a data entry", path.display())))
}

pub fn sample_cmd(args: &SampleArgs) -> CliResult<()> {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    if !args.ckpt.is_dir() {
        return Err(CliError::Missing(format!("checkpoint {} not found", args.ckpt.display())));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data_dir = match &args.data {
        Some(d) => d.clone(),
        None => checkpoint_data_dir(&args.ckpt)?,
    };
    let data = open_dataset(&data_dir)?;
    let positions = args
        .samples
        .iter()
        .map(|id| position(&data, id))
        .collect::<CliResult<Vec<_>>>()?;
    create_dir(&args.out)?;
    for (id, &pos) in args.samples.iter().zip(&positions) {
        let s = data.load(pos)?;
        let sigma = ckpt.config.sigma_for(s.height(), s.width());
        let (cond, _) = build_conditioning(&s, sigma, &ckpt.codec, ckpt.config.ablation)?;
        let video = sample(&ckpt.state, &ckpt.codec, &cond, args.steps, args.seed)?;
        write_video(args.out.join(format!("{id}.bin")), &video)?;
        write_png_frames(&video, args.out.join("frames"), id)?;
        println!("sampled {id}: {} frames", video.shape()[1]);
    }
    write_json(
        &args.out.join(EFFECTIVE_CONFIG),
        &json!({
            "command": "sample",
            "samples": args.samples,
            "steps": args.steps,
            "seed": args.seed,
            "checkpoint_steps": ckpt.steps_completed,
            "train": ckpt.config,
        }),
    )
}

/// Motion frames (all but the given reference frame) of a joint clip.
fn motion(video: &Video) -> Video {
    video.slice(s![.., 1.., .., ..]).to_owned()
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let data = open_dataset(&args.data)?;
    let ids: Vec<String> = match &args.pred {
        None => (0..data.len()).map(|i| data.id(i).to_string()).collect(),
        Some(dir) => {
            let entries = fs::read_dir(dir)
                .map_err(|_| CliError::Missing(format!("prediction directory {} not found", dir.display())))?;
            let mut ids: Vec<String> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .collect();
            ids.sort();
            ids
        }
    };
    if ids.is_empty() {
        return Err(CliError::Missing("no predicted clips to evaluate".into()));
    }
    let mut rows: Vec<MetricRow> = Vec::new();
    for id in &ids {
        let s = data.load(position(&data, id)?)?;
        let truth = s.joint_target()?;
        let prediction = match &args.pred {
            Some(dir) => read_video(dir.join(format!("{id}.bin")))?,
            None => {
                let sigma = mask_sigma_for(s.height(), s.width());
                let (cond, _) = build_condition(&s, sigma)?;
                let mut joint = truth.clone();
                joint.slice_mut(s![.., 1.., .., ..]).assign(&cond.motion_frames());
                joint
            }
        };
        if prediction.dim() != truth.dim() {
            return Err(CliError::Contract(format!(
                "prediction for {id} has shape {:?}, ground truth {:?}",
                prediction.shape(),
                truth.shape()
            )));
        }
        let report = region_report(&motion(&prediction), &motion(&truth), &motion(&s.joint_body_mask()?))?;
        rows.extend(report.rows(id));
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_metric_csv(&args.out, &rows)?;
    for (metric, region) in [("psnr", "all"), ("psnr", "body"), ("psnr", "background"), ("ssim", "all")] {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == metric && r.region == region)
            .map(|r| r.value)
            .collect();
        if !vals.is_empty() {
            println!("mean {metric} {region}: {:.4}", vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(())
}

pub fn inspect_masks(args: &InspectArgs) -> CliResult<()> {
    let data = open_dataset(&args.data)?;
    let s = data.load(position(&data, &args.sample)?)?;
    let sigma = args.mask_sigma.unwrap_or_else(|| mask_sigma_for(s.height(), s.width()));
    if !(sigma > 0.0) {
        return Err(CliError::Usage("--mask-sigma must be positive".into()));
    }
    let (_, soft) = build_condition(&s, sigma)?;
    let soft_motion = motion(&soft);
    create_dir(&args.out)?;
    write_png_frames(&soft_motion, &args.out, "soft")?;
    for (mode, name) in [(MaskMode::BaseI2v, "base"), (MaskMode::Avatar, "avatar")] {
        let mask = joint_mask(mode, &soft_motion)?;
        write_png_frames(&mask, &args.out, &format!("mask_{name}"))?;
        let packed = pack_mask(&mask)?;
        write_video(args.out.join(format!("latent_{name}.bin")), &packed)?;
        for g in 0..packed.shape()[1] {
            let channels = packed.slice(s![.., g..g + 1, .., ..]).permuted_axes([1, 0, 2, 3]).to_owned();
            write_png_frames(&channels, &args.out, &format!("latent_{name}_g{g:02}"))?;
        }
    }
    write_json(
        &args.out.join(EFFECTIVE_CONFIG),
        &json!({
            "command": "inspect-masks",
            "sample": args.sample,
            "mask_sigma": sigma,
        }),
    )?;
    println!("wrote mask dumps for {} to {}", args.sample, args.out.display());
    Ok(())
}
