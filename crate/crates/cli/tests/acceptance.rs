//! Acceptance suite. Runs the ten acceptance criteria in order and prints
//! one PASS/FAIL line per criterion; exits nonzero if any criterion fails.
//!
//! The restoration and ablation experiments drive the `avatarbg` binary end
//! to end. Their artifacts (datasets, checkpoints, metric and loss CSVs) are
//! kept under `CARGO_TARGET_TMPDIR/acceptance`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use avatarbg_core::compositor::{blur_radius, build_condition, gaussian_kernel_1d, soften_mask};
use avatarbg_core::condtowers::{Tower, TowerConfig};
use avatarbg_core::dataset::generate_sample;
use avatarbg_core::dit::{tiny_config, ForwardMode, ModelConfig, ModelInput, ModelState};
use avatarbg_core::latentcodec::{latent_shape, Codec, LinearCodec};
use avatarbg_core::maskembed::{avatar_mask, pack_mask};
use avatarbg_core::nn::Module;
use avatarbg_core::sampler::integrate;
use avatarbg_core::synthdata::{Degradation, SceneConfig};
use avatarbg_core::trainer::{standard_normal_latent, TrainConfig};
use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Outcome {
    passed: bool,
}

fn run(id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(check)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(e) => (false, e),
    };
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} {verdict} {name}: {detail} [{:.2?}]", elapsed);
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
    Outcome { passed }
}

fn rand4(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f32> {
    Array4::from_shape_simple_fn(dim, || rng.random::<f32>())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn artifacts() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------------------
// 1. Shape contract

fn shape_contract() -> Check {
    for (t, h, w) in [(17, 64, 64), (81, 480, 832), (33, 96, 96)] {
        let want = (1 + (t - 1) / 4, h / 8, w / 8);
        let got = latent_shape(t, h, w).map_err(err)?;
        ensure(got == want, || format!("latent_shape{:?} = {got:?}, want {want:?}", (t, h, w)))?;
        // Encoding the full-size clip costs more than the whole budget on a
        // single core; the shape math it relies on is checked above.
        if h * w <= 96 * 96 {
            let latent = Codec::Lossless.encode(&Array4::zeros((3, t, h, w))).map_err(err)?;
            ensure(latent.dim() == (768, want.0, want.1, want.2), || {
                format!("lossless latent {:?} for {:?}", latent.dim(), (t, h, w))
            })?;
        }
        let mask = pack_mask(&Array4::zeros((1, t, h, w))).map_err(err)?;
        ensure(mask.dim() == (4, want.0, want.1, want.2), || {
            format!("mask latent {:?} for {:?}", mask.dim(), (t, h, w))
        })?;
    }
    Ok("3 sizes, latent and mask shapes exact; lossless encode checked at the two small sizes".into())
}

// ---------------------------------------------------------------------------
// 2. Mask packing oracle

/// Materializes the padded frame list `[f0, f0, f0, f0, f1, ...]` and indexes
/// it directly; each cell is an f64 row-major area sum.
fn oracle_pack(mask: &Array4<f32>) -> Array4<f32> {
    let (_, t, h, w) = mask.dim();
    let mut frames = vec![mask.slice(s![0, 0, .., ..]); 3];
    frames.extend((0..t).map(|i| mask.slice(s![0, i, .., ..])));
    let tl = frames.len() / 4;
    Array4::from_shape_fn((4, tl, h / 8, w / 8), |(k, g, i, j)| {
        let f = &frames[4 * g + k];
        let mut acc = 0.0f64;
        for dy in 0..8 {
            for dx in 0..8 {
                acc += f[[8 * i + dy, 8 * j + dx]] as f64;
            }
        }
        (acc / 64.0) as f32
    })
}

fn random_soft_mask(rng: &mut ChaCha8Rng) -> Array4<f32> {
    let motion = [4, 8, 16][rng.random_range(0..3)];
    let h = 8 * rng.random_range(2..9);
    let w = 8 * rng.random_range(2..9);
    if rng.random_bool(0.3) {
        return rand4((1, motion + 1, h, w), rng);
    }
    let mut body = Array4::<f32>::zeros((1, motion, h, w));
    for t in 0..motion {
        let (cy, cx) = (rng.random_range(0..h) as f32, rng.random_range(0..w) as f32);
        let r = rng.random_range(2.0..(h.min(w) as f32 / 2.0));
        for y in 0..h {
            for x in 0..w {
                if (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) <= r * r {
                    body[[0, t, y, x]] = 1.0;
                }
            }
        }
    }
    let soft = soften_mask(&body, rng.random_range(0.5..3.0)).expect("valid sigma");
    avatar_mask(&soft).expect("soft mask in range")
}

fn mask_packing_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let m = random_soft_mask(&mut rng);
        let packed = pack_mask(&m).map_err(err)?;
        let oracle = oracle_pack(&m);
        ensure(packed.dim() == oracle.dim(), || format!("{:?} vs oracle {:?}", packed.dim(), oracle.dim()))?;
        let d = (&packed - &oracle).iter().fold(0.0f32, |a, v| a.max(v.abs()));
        worst = worst.max(d);
    }
    ensure(worst == 0.0, || format!("max abs diff {worst}"))?;
    Ok("100 soft masks, max abs diff 0".into())
}

// ---------------------------------------------------------------------------
// 3. Lossless codec round trip and causality

/// Latent groups that may change when pixel frame `t` changes: group 0
/// holds frame 0, group `g >= 1` holds frames `4g - 3 ..= 4g`.
fn earliest_affected_group(t: usize) -> usize {
    t.div_ceil(4)
}

fn causality(codec: &Codec, clip: &Array4<f32>, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let frames = clip.shape()[1];
    let base = codec.encode(clip).map_err(err)?;
    for t in [0, rng.random_range(1..frames), frames - 1] {
        let mut probe = clip.clone();
        probe.slice_mut(s![.., t, .., ..]).mapv_inplace(|v| 1.0 - v);
        let out = codec.encode(&probe).map_err(err)?;
        for g in 0..earliest_affected_group(t) {
            ensure(out.slice(s![.., g, .., ..]) == base.slice(s![.., g, .., ..]), || {
                format!("changing frame {t} changed latent group {g}")
            })?;
        }
        ensure(out != base, || format!("changing frame {t} changed nothing"))?;
    }
    Ok(())
}

fn codec_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trainable = Codec::Trainable(LinearCodec::new(16, 5).map_err(err)?);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let t = [1, 5, 9, 17][rng.random_range(0..4)];
        let (h, w) = (8 * rng.random_range(1..5), 8 * rng.random_range(1..5));
        let clip = rand4((3, t, h, w), &mut rng);
        let back = Codec::Lossless.decode(&Codec::Lossless.encode(&clip).map_err(err)?).map_err(err)?;
        worst = worst.max((&back - &clip).iter().fold(0.0f32, |a, v| a.max(v.abs())));
        if t > 1 {
            causality(&Codec::Lossless, &clip, &mut rng)?;
            causality(&trainable, &clip, &mut rng)?;
        }
    }
    ensure(worst <= 1e-6, || format!("max round-trip error {worst}"))?;
    Ok(format!("50 clips, max abs error {worst:e}; causality holds for both codecs"))
}

// ---------------------------------------------------------------------------
// 4. Zero-init equivalence

fn desk_config() -> Result<TrainConfig, String> {
    let path = workspace_root().join("configs/desk.json");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(err)
}

fn zero_init_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let configs = [ModelConfig::default(), desk_config()?.model];
    let mut checked = 0;
    for (k, cfg) in configs.into_iter().enumerate() {
        let state = ModelState::<f32>::new(cfg).map_err(err)?;
        let c = state.config.latent_channels();
        for _ in 0..10 {
            let noisy = rand4((c, 5, 8, 8), &mut rng) * 2.0 - 1.0;
            let cond = rand4((c, 5, 8, 8), &mut rng);
            let mask = rand4((4, 5, 8, 8), &mut rng);
            let mesh = rand4((3, 17, 64, 64), &mut rng);
            let condition = rand4((3, 17, 64, 64), &mut rng);
            let input = ModelInput {
                noisy: noisy.view(),
                cond: cond.view(),
                mask: mask.view(),
                mesh_video: mesh.view(),
                condition_video: condition.view(),
                t: rng.random_range(0.02..1.0),
            };
            let (full, _) = state.forward(&input, ForwardMode::Full).map_err(err)?;
            let (base, _) = state.forward(&input, ForwardMode::Base).map_err(err)?;
            let same = full.iter().zip(base.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("config {k}: full and base forwards differ"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} random inputs bit-identical (default and desk configs)"))
}

// ---------------------------------------------------------------------------
// 5. Gradient checks

fn relative_error(numeric: f64, analytic: f64) -> Option<f64> {
    let scale = numeric.abs().max(analytic.abs());
    (scale >= 1e-7).then(|| (numeric - analytic).abs() / scale)
}

fn tower_gradient_check() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = TowerConfig {
        hidden: [3, 4],
        d_cond: 2,
    };
    let mut tower = Tower::<f64>::new(&cfg, &mut rng);
    tower.visit_mut("", &mut |_, p| p.value.mapv_inplace(|v| v + 0.2 * (rng.random::<f64>() - 0.5)));
    let x = Array4::from_shape_simple_fn((3, 5, 16, 16), || rng.random::<f64>());
    let (y, cache) = tower.forward(x.view()).map_err(err)?;
    let gy = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random::<f64>() - 0.5);
    tower.zero_grad();
    tower.backward(&cache, &gy);
    let mut grads = Vec::new();
    tower.visit("", &mut |n, p| grads.push((n.to_string(), p.grad.iter().cloned().collect::<Vec<_>>())));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for k in [0, grad.len() / 3, grad.len() / 2, grad.len() - 1] {
            let eval = |d: f64| {
                let mut probe = tower.clone();
                probe.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.as_slice_mut().expect("contiguous")[k] += d;
                    }
                });
                (probe.forward(x.view()).expect("forward").0 * &gy).sum()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            if let Some(rel) = relative_error(num, grad[k]) {
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn dit_gradient_check() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut m = ModelState::<f64>::new(tiny_config(4)).map_err(err)?;
    m.visit_mut("", &mut |_, p| {
        if p.trainable {
            p.value.mapv_inplace(|v| v + 0.3 * (rng.random::<f64>() * 2.0 - 1.0));
        }
    });
    let mut r4 = |d: (usize, usize, usize, usize)| Array4::from_shape_simple_fn(d, || rng.random::<f64>());
    let (noisy, cond, mask) = (r4((4, 1, 8, 8)) - 0.5, r4((4, 1, 8, 8)), r4((4, 1, 8, 8)));
    let (mesh, condition) = (r4((3, 1, 64, 64)), r4((3, 1, 64, 64)));
    let g = r4((4, 1, 8, 8)) - 0.5;
    let t = 0.55;
    let input = ModelInput {
        noisy: noisy.view(),
        cond: cond.view(),
        mask: mask.view(),
        mesh_video: mesh.view(),
        condition_video: condition.view(),
        t,
    };
    m.zero_grad();
    let (_, cache) = m.forward(&input, ForwardMode::Full).map_err(err)?;
    m.backward(&cache, &g).map_err(err)?;
    let mut grads = Vec::new();
    m.visit("", &mut |n, p| {
        if p.trainable {
            grads.push((n.to_string(), p.grad.iter().cloned().collect::<Vec<_>>()));
        }
    });
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        let len = grad.len();
        for k in [0, len / 3, len / 2, len - 1] {
            let eval = |d: f64| {
                let mut probe = m.clone();
                probe.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.as_slice_mut().expect("contiguous")[k] += d;
                    }
                });
                (probe.forward(&input, ForwardMode::Full).expect("forward").0 * &g).sum()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            if let Some(rel) = relative_error(num, grad[k]) {
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let tower = tower_gradient_check()?;
    let dit = dit_gradient_check()?;
    ensure(tower <= 1e-3 && dit <= 1e-3, || {
        format!("worst relative error: tower {tower:e}, tiny model {dit:e}")
    })?;
    Ok(format!("worst relative error: tower {tower:.2e}, tiny model {dit:.2e}"))
}

// ---------------------------------------------------------------------------
// 6. Compositor oracle

fn compositor_oracle() -> Check {
    let scene = SceneConfig::new(17, 64, 64);
    for i in 0..20 {
        let sample = generate_sample(6, i, &scene, &Degradation::none()).map_err(err)?;
        let (condition, _) = build_condition(&sample, 2.0).map_err(err)?;
        ensure(condition.frames == sample.target_video, || format!("scene {i}: condition differs from truth"))?;
    }
    let mut worst = 0.0f64;
    for sigma in [0.3, 0.5, 1.0, 2.0, 3.7, 8.0] {
        let k = gaussian_kernel_1d(sigma, blur_radius(sigma)).map_err(err)?;
        let sum2: f64 = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).sum();
        worst = worst.max((k.iter().sum::<f64>() - 1.0).abs()).max((sum2 - 1.0).abs());
    }
    ensure(worst <= 1e-12, || format!("kernel sum off by {worst:e}"))?;
    Ok(format!("20 scenes exact; kernel sums within {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 7. Sampler integration oracle

fn sampler_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = standard_normal_latent(&mut rng, (768, 5, 8, 8));
    let eps = standard_normal_latent(&mut rng, (768, 5, 8, 8));
    let mut details = Vec::new();
    for steps in [1, 10, 50] {
        let out = integrate(eps.clone(), steps, |_, _| Ok(&eps - &x0)).map_err(err)?;
        let e = (&out - &x0).iter().fold(0.0f32, |a, v| a.max(v.abs()));
        ensure(e <= 1e-5, || format!("{steps} steps: max error {e}"))?;
        details.push(format!("{steps}:{e:.1e}"));
    }
    Ok(format!("max error by steps {}", details.join(" ")))
}

// ---------------------------------------------------------------------------
// Binary helpers

fn avatarbg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_avatarbg"))
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "avatarbg {} failed ({}): {}",
            args.first().unwrap_or(&""),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn fresh_dir(path: &Path) -> Result<(), String> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(err)?;
    }
    fs::create_dir_all(path).map_err(err)
}

/// Relative path → contents for every file under `dir`.
fn tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(err)? {
            let path = e.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(err)?.to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).map_err(err)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Mean of a metric/region column of an `eval` CSV.
fn csv_mean(path: &Path, metric: &str, region: &str) -> Result<f64, String> {
    let text = fs::read_to_string(path).map_err(err)?;
    let vals: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4 && f[1] == metric && f[2] == region).then(|| f[3].parse::<f64>().ok())?
        })
        .collect();
    ensure(!vals.is_empty(), || format!("{}: no {metric}/{region} rows", path.display()))?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn held_out_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("scene_{i:04}")).collect()
}

// ---------------------------------------------------------------------------
// 8. Desk restoration experiment

/// Scenes and steps of the CPU-only run (the reduced scale allowed for
/// machines without an accelerator).
const TRAIN_SCENES: usize = 50;
const TRAIN_STEPS: usize = 1000;
const HELD_OUT: usize = 20;
const HELD_OUT_SEED: u64 = 1_000_003;

fn restoration_experiment() -> Check {
    let root = artifacts().join("restoration");
    fresh_dir(&root)?;
    let (train, test, ckpt, pred) = (root.join("train"), root.join("test"), root.join("ckpt"), root.join("pred"));
    let scenes = TRAIN_SCENES.to_string();
    avatarbg(&["gen-data", "--out", p(&train), "--scenes", &scenes, "--frames", "16", "--size", "64x64", "--seed", "0"])?;
    let held = HELD_OUT.to_string();
    let held_seed = HELD_OUT_SEED.to_string();
    avatarbg(&["gen-data", "--out", p(&test), "--scenes", &held, "--frames", "16", "--size", "64x64", "--seed", &held_seed])?;
    let config = workspace_root().join("configs/desk.json");
    let steps = TRAIN_STEPS.to_string();
    avatarbg(&["train", "--data", p(&train), "--config", p(&config), "--out", p(&ckpt), "--steps", &steps, "--seed", "0", "--log-every", "0"])?;
    let ids = held_out_ids(HELD_OUT);
    let mut args = vec!["sample", "--ckpt", p(&ckpt), "--data", p(&test), "--out", p(&pred), "--seed", "0"];
    for id in &ids {
        args.extend(["--sample", id.as_str()]);
    }
    avatarbg(&args)?;
    let (pred_csv, cond_csv) = (root.join("sampled.csv"), root.join("condition.csv"));
    avatarbg(&["eval", "--pred", p(&pred), "--data", p(&test), "--out", p(&pred_csv)])?;
    avatarbg(&["eval", "--condition", "--data", p(&test), "--out", p(&cond_csv)])?;
    let m = |csv: &Path, region| csv_mean(csv, "psnr", region);
    let (all, all_c) = (m(&pred_csv, "all")?, m(&cond_csv, "all")?);
    let (body, body_c) = (m(&pred_csv, "body")?, m(&cond_csv, "body")?);
    let (bg, bg_c) = (m(&pred_csv, "background")?, m(&cond_csv, "background")?);
    let detail = format!(
        "PSNR sampled vs condition: all {all:.3} vs {all_c:.3} ({:+.3} dB), body {body:.3} vs {body_c:.3} ({:+.3} dB), \
         background {bg:.3} vs {bg_c:.3} ({:+.3} dB)",
        all - all_c,
        body - body_c,
        bg - bg_c
    );
    ensure(all - all_c >= 1.0 && body > body_c && bg_c - bg <= 0.5, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Ablation direction

const ABLATION_SCENES: usize = 50;
const ABLATION_STEPS: usize = 300;

fn final_ema(run: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(run.join("run.json")).map_err(err)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
    v["final_ema_loss"].as_f64().ok_or_else(|| "run.json lacks final_ema_loss".into())
}

fn ablation_direction() -> Check {
    let root = artifacts().join("ablation");
    fresh_dir(&root)?;
    let data = root.join("data");
    let scenes = ABLATION_SCENES.to_string();
    avatarbg(&["gen-data", "--out", p(&data), "--scenes", &scenes, "--frames", "16", "--size", "64x64", "--seed", "0"])?;
    let config = workspace_root().join("configs/desk.json");
    let steps = ABLATION_STEPS.to_string();
    let mut losses = Vec::new();
    for (label, flag) in [("full", None), ("no_mask", Some("--no-mask-strategy")), ("no_avatar", Some("--no-avatar-condition"))] {
        let out = root.join(label);
        let mut args = vec!["train", "--data", p(&data), "--config", p(&config), "--out", p(&out), "--steps", &steps, "--seed", "0", "--log-every", "0"];
        args.extend(flag);
        avatarbg(&args)?;
        let index: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("index.json")).map_err(err)?).map_err(err)?;
        ensure(index["ablation"] == label, || format!("{label}: checkpoint carries label {}", index["ablation"]))?;
        losses.push((label, final_ema(&out)?));
    }
    let mut csv = String::from("variant,final_ema_loss\n");
    for (label, loss) in &losses {
        csv.push_str(&format!("{label},{loss}\n"));
    }
    let csv_path = root.join("ablation_losses.csv");
    fs::write(&csv_path, csv).map_err(err)?;
    let (full, no_mask, no_avatar) = (losses[0].1, losses[1].1, losses[2].1);
    let detail = format!(
        "final EMA loss full {full:.6}, w/o mask {no_mask:.6}, w/o avatar {no_avatar:.6} ({})",
        csv_path.display()
    );
    ensure(full <= no_mask && full <= no_avatar, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn determinism() -> Check {
    let root = artifacts().join("determinism");
    fresh_dir(&root)?;
    let gen = |dir: &Path| {
        avatarbg(&["gen-data", "--out", p(dir), "--scenes", "3", "--frames", "8", "--size", "32x48", "--seed", "11"])
    };
    let (a, b) = (root.join("data_a"), root.join("data_b"));
    gen(&a)?;
    gen(&b)?;
    let (ta, tb) = (tree(&a)?, tree(&b)?);
    ensure(!ta.is_empty() && ta == tb, || "gen-data outputs differ between runs".into())?;

    let config = r#"{"model": {"dit": {"depth": 1, "width": 32, "heads": 2, "time_freq_dim": 16, "mlp_ratio": 2,
        "lora_rank": 2, "head_lora_rank": 2}, "towers": {"hidden": [4, 4], "d_cond": 8}}, "batch_size": 2, "lr": 0.001}"#;
    let ckpt = root.join("ckpt");
    avatarbg(&["train", "--data", p(&a), "--config", config, "--out", p(&ckpt), "--steps", "4", "--log-every", "0"])?;
    let sample = |dir: &Path| {
        avatarbg(&[
            "sample", "--ckpt", p(&ckpt), "--sample", "scene_0001", "--sample", "scene_0002", "--steps", "5", "--seed", "3",
            "--out", p(dir),
        ])
    };
    let (sa, sb) = (root.join("sample_a"), root.join("sample_b"));
    sample(&sa)?;
    sample(&sb)?;
    let (ta, tb) = (tree(&sa)?, tree(&sb)?);
    ensure(ta == tb, || "sample outputs differ between runs".into())?;
    let pngs = ta.iter().filter(|(n, _)| n.ends_with(".png")).count();
    ensure(pngs == 2 * 9, || format!("expected 18 PNG frames, found {pngs}"))?;
    Ok(format!("gen-data ({} files) and sample ({} files) byte-identical across runs", tb.len(), ta.len()))
}

type Criterion = (usize, &'static str, Duration, fn() -> Check);

/// Criteria in run order: fast checks first, then the experiments.
const CRITERIA: [Criterion; 10] = [
    (1, "shape contract", Duration::from_secs(1), shape_contract),
    (2, "mask packing oracle", Duration::from_secs(10), mask_packing_oracle),
    (3, "lossless codec round trip", Duration::from_secs(30), codec_round_trip),
    (4, "zero-init equivalence", Duration::from_secs(30), zero_init_equivalence),
    (5, "gradient checks", Duration::from_secs(300), gradient_checks),
    (6, "compositor oracle", Duration::from_secs(30), compositor_oracle),
    (7, "sampler integration oracle", Duration::from_secs(30), sampler_oracle),
    (10, "determinism", Duration::from_secs(120), determinism),
    (9, "ablation direction", Duration::from_secs(24 * 3600), ablation_direction),
    (8, "desk restoration experiment", Duration::from_secs(24 * 3600), restoration_experiment),
];

/// Runs every criterion, or only the criterion numbers given as arguments.
fn main() {
    fs::create_dir_all(artifacts()).expect("artifact directory");
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let outcomes: Vec<Outcome> = CRITERIA
        .iter()
        .filter(|(id, ..)| only.is_empty() || only.contains(id))
        .map(|&(id, name, budget, check)| run(id, name, budget, check))
        .collect();
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let mut err = std::io::stderr();
    let _ = writeln!(err, "acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
