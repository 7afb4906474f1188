//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits nonzero if any fails. Criteria 5 to 7 train
//! four small models and dominate the runtime (roughly 15 minutes on one core).

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use tokenmotion_cli::{eval, gen_data, gradcheck, sample, train, SampleRequest, LOSS_LOG};
use tokenmotion_core::backbone::{Conditions, Model, ModelConfig};
use tokenmotion_core::camera::*;
use tokenmotion_core::config::{LrSchedule, RunConfig};
use tokenmotion_core::data::{clip_paths, Clip};
use tokenmotion_core::fusion::{fuse_tokens, fusion_weights, FuseMode};
use tokenmotion_core::gradsuite::{BLOCK_TOL, MODEL_TOL, PRIMITIVE_TOL};
use tokenmotion_core::metrics::{rot_err, trans_err, METRIC_NAMES};
use tokenmotion_core::params::{Init, ParamStore, Role};
use tokenmotion_core::patchify::{
    encode_constant, EncoderKind, EncoderShape, MotionEncoder, MotionTokens, TokenGrid,
};
use tokenmotion_core::train::{window_mean, StepLog};
use tokenmotion_core::CoreError;
use tokenmotion_tensor::{Rng, Tape, Tensor};

const FULL_MODEL: &str = "full model";
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const PLUCKER_TOL: f64 = 1e-9;
const HAND_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const SATURATION_TOL: f64 = 1e-8;
const OVERFIT_STEPS: usize = 5000;
const OVERFIT_RATIO: f64 = 0.1;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const LOSS_WINDOW: usize = 100;
const MIN_CONTROL_WINS: usize = 3;
const RIGID_CASES: u64 = 100;
const RIGID_TOL: f64 = 1e-9;
const PARSER_TOL: f64 = 1e-12;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: CoreError) -> String {
    e.to_string()
}

struct Suite {
    failed: usize,
    /// Criterion ids given on the command line; empty runs all of them.
    only: Vec<usize>,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Check) {
        if !self.only.is_empty() && !self.only.contains(&id) {
            return;
        }
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if r.is_err() {
            self.failed += 1;
        }
        println!("criterion {id:>2} {name:<20} {tag} ({secs:.1}s) {detail}");
    }
}

// 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let results = gradcheck(0, false).map_err(err)?;
    let elapsed = start.elapsed();
    for r in &results {
        println!("    {}", r.line());
    }
    for r in &results {
        let want = if r.name == FULL_MODEL { 1e-3 } else { 1e-4 };
        ensure(
            r.tolerance == want,
            format!("{} checked at tolerance {}", r.name, r.tolerance),
        )?;
        ensure(
            r.passed(),
            format!("{} max_rel_err {:.2e}", r.name, r.max_rel_err),
        )?;
    }
    ensure(
        PRIMITIVE_TOL == 1e-4 && BLOCK_TOL == 1e-4 && MODEL_TOL == 1e-3,
        "tolerances drifted",
    )?;
    ensure(
        results.iter().any(|r| r.name == FULL_MODEL),
        "no full-model check",
    )?;
    ensure(elapsed < GRAD_BUDGET, format!("took {elapsed:?}"))?;
    let corrupted = gradcheck(0, true).map_err(err)?;
    ensure(
        corrupted.iter().all(|r| !r.passed()),
        "corrupted gradients went unnoticed",
    )?;
    let worst = results
        .iter()
        .map(|r| r.max_rel_err / r.tolerance)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst err/tol {worst:.2e}, {:.1}s; corrupted run fails all",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

// 2

fn plucker_algebra() -> Check {
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    let mut rays = 0;
    for _ in 0..2000 {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let r = rotation_about(axis, (rng.uniform() * 2.0 - 1.0) * std::f64::consts::PI);
        let t = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 3.0;
        let e = Extrinsics::new(r, t).map_err(err)?;
        let k = Intrinsics::new(
            0.3 + 2.7 * rng.uniform(),
            0.3 + 2.7 * rng.uniform(),
            rng.uniform(),
            rng.uniform(),
        )
        .map_err(err)?
        .to_pixels(32, 32);
        let (u, v) = (32.0 * rng.uniform(), 32.0 * rng.uniform());
        for conv in [RayConvention::Paper, RayConvention::Classic] {
            match pixel_ray(u, v, &k, &e, conv) {
                Ok(ray) => {
                    let d = Vector3::new(ray[0], ray[1], ray[2]);
                    let m = Vector3::new(ray[3], ray[4], ray[5]);
                    worst = worst.max((d.norm() - 1.0).abs()).max(d.dot(&m).abs());
                    rays += 1;
                }
                Err(CoreError::DegenerateRay { .. }) => {}
                Err(e) => return Err(err(e)),
            }
        }
    }
    ensure(
        worst < PLUCKER_TOL,
        format!("invariant violated by {worst:.2e}"),
    )?;

    let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).map_err(err)?;
    let centered =
        pixel_ray(0.0, 0.0, &k, &Extrinsics::identity(), RayConvention::Paper).map_err(err)?;
    let shifted_pose =
        Extrinsics::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).map_err(err)?;
    let shifted = pixel_ray(0.0, 0.0, &k, &shifted_pose, RayConvention::Paper).map_err(err)?;
    let s = 0.5f64.sqrt();
    let hand = [
        (centered, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        (shifted, [s, 0.0, s, 0.0, -s, 0.0]),
    ];
    let hand_err = hand
        .iter()
        .flat_map(|(got, want)| got.iter().zip(want).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    ensure(
        hand_err < HAND_TOL,
        format!("hand examples off by {hand_err:.2e}"),
    )?;
    Ok(format!("{rays} rays, worst {worst:.1e} (tol {PLUCKER_TOL:e}); hand examples {hand_err:.1e} (tol {HAND_TOL:e})"))
}

// 3

fn constant_tokens<'t>(tape: &'t Tape, v: Tensor, grid: TokenGrid) -> MotionTokens<'t> {
    MotionTokens {
        tokens: tape.constant(v),
        grid,
    }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        width: 24,
        heads: 2,
        blocks: 2,
        p: 2,
        q: 2,
        lora_rank: 2,
        frames: 4,
        height: 8,
        width_px: 8,
        ..ModelConfig::default()
    }
}

fn fusion_contracts() -> Check {
    let grid = TokenGrid { t: 2, h: 2, w: 2 };
    let mut sum_err = 0.0f64;
    let mut sat_err = 0.0f64;
    for seed in 0..200 {
        let tape = Tape::new();
        let mut rng = Rng::new(seed);
        let scale = 0.1 + 50.0 * rng.uniform();
        let mp = tape.constant(rng.normal_tensor(&[8], scale));
        let mc = tape.constant(rng.normal_tensor(&[8], scale));
        let w = fusion_weights(&mp, &mc).map_err(err)?.value();
        for row in w.data().chunks(2) {
            ensure(row[0] >= 0.0 && row[1] >= 0.0, "negative fusion weight")?;
            sum_err = sum_err.max((row[0] + row[1] - 1.0).abs());
        }
        let (a, c) = (
            rng.normal_tensor(&[8, 6], 1.0),
            rng.normal_tensor(&[8, 6], 1.0),
        );
        let base = rng.normal_tensor(&[8], 1.0);
        let fused = fuse_tokens(
            &constant_tokens(&tape, a.clone(), grid),
            &constant_tokens(&tape, c, grid),
            &tape.constant(base.map(|v| v + 1e4)),
            &tape.constant(base),
        )
        .map_err(err)?;
        sat_err = sat_err.max(fused.tokens.value().max_abs_diff(&a));
    }
    ensure(
        sum_err < WEIGHT_SUM_TOL,
        format!("weights sum off by {sum_err:.2e}"),
    )?;
    ensure(
        sat_err < SATURATION_TOL,
        format!("saturated output off by {sat_err:.2e}"),
    )?;

    // Wake the zero-initialized backbone factors, keep LoRA B at zero.
    let mut model = Model::new(toy_model_config(), 3).map_err(err)?;
    for (_, p) in model.store.iter_mut() {
        if p.role == Role::Backbone
            && (p.name.contains("mod_") || p.name.ends_with("_b1") || p.name.ends_with("_b2"))
        {
            p.value = Rng::stream(3, &p.name).normal_tensor(p.value.shape(), 0.3);
        }
    }
    let cfg = &model.config;
    let x = Rng::new(1).normal_tensor(&cfg.video_shape(), 1.0);
    let prompt = "a person walking";
    let mut text_only = model.null_conditions();
    text_only.prompt = prompt.into();
    let plain = model.apply(&x, 0.1, &text_only, false).map_err(err)?;
    ensure(plain.max_abs() > 0.0, "backbone output is trivially zero")?;
    let mut rng = Rng::new(9);
    for _ in 0..3 {
        let (t, h, w) = (cfg.frames, cfg.height, cfg.width_px);
        let cond = Conditions {
            prompt: prompt.into(),
            camera: rng.normal_tensor(&[6, t, h, w], 1.0),
            pose: rng.uniform_tensor(&[3, t, h, w], 1.0).map(|v| v.max(0.0)),
        };
        let out = model.apply(&x, 0.1, &cond, true).map_err(err)?;
        let same = out
            .data()
            .iter()
            .zip(plain.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, "control branch changed the output at initialization")?;
    }
    Ok(format!(
        "sum err {sum_err:.1e} (tol {WEIGHT_SUM_TOL:e}), saturation err {sat_err:.1e} (tol {SATURATION_TOL:e}), zero-LoRA output bitwise equal"
    ))
}

// 4

fn causality() -> Check {
    let (c, t_frames, h, w, p, d) = (3, 8, 4, 4, 2, 12);
    let mut cases = 0;
    for kind in [EncoderKind::Patchify, EncoderKind::ControlNet] {
        for q in [1, 2, 4] {
            let s = EncoderShape {
                channels: c,
                width: d,
                p,
                q,
            };
            let mut store = ParamStore::new();
            let enc = MotionEncoder::init(
                &mut Init::new(&mut store, q as u64, Role::Encoder, ""),
                kind,
                s,
            );
            for (_, prm) in store.iter_mut() {
                if prm.name.ends_with("_b") {
                    prm.value = Rng::stream(1, &prm.name).normal_tensor(prm.value.shape(), 0.1);
                }
            }
            let mut rng = Rng::new(q as u64);
            let x = rng.normal_tensor(&[c, t_frames, h, w], 1.0);
            let base = encode_constant(&enc, &store, &x).map_err(err)?;
            let per_slice = (h / p) * (w / p) * d;
            for frame in 0..t_frames {
                let mut y = x.clone();
                for ch in 0..c {
                    for i in 0..h * w {
                        y.data_mut()[(ch * t_frames + frame) * h * w + i] += 1.0 + rng.uniform();
                    }
                }
                let out = encode_constant(&enc, &store, &y).map_err(err)?;
                let kept = (frame / q) * per_slice;
                let same = base.data()[..kept]
                    .iter()
                    .zip(&out.data()[..kept])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(
                    same,
                    format!("{kind:?} q={q}: frame {frame} reached an earlier slice"),
                )?;
                ensure(
                    base.data()[kept..] != out.data()[kept..],
                    format!("{kind:?} q={q}: frame {frame} ignored"),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} perturbations, earlier slices bitwise unchanged, own slice affected"
    ))
}

// 5, 6, 7

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        width: 48,
        heads: 4,
        blocks: 2,
        p: 2,
        q: 2,
        lora_rank: 4,
        frames: 4,
        height: 8,
        width_px: 8,
        ..ModelConfig::default()
    };
    cfg.batch_size = 4;
    cfg.p_drop = 0.1;
    cfg.adam.lr = 3e-3;
    cfg.lr_schedule = LrSchedule::Cosine;
    cfg.lr_floor = 0.05;
    cfg.train_steps = OVERFIT_STEPS;
    cfg.checkpoint_every = OVERFIT_STEPS;
    cfg.clips = 4;
    cfg.camera_only_fraction = 0.0;
    cfg.seed = 0;
    cfg
}

struct OverfitRun {
    cfg: RunConfig,
    model: Model,
    clips: Vec<Clip>,
    logs: Vec<StepLog>,
}

fn loss_ratio(logs: &[StepLog]) -> (f64, f64, f64) {
    let n = logs.len();
    let first = window_mean(logs, 0..LOSS_WINDOW);
    let last = window_mean(logs, n - LOSS_WINDOW..n);
    (first, last, last / first)
}

fn overfit(root: &Path, run: &mut Option<OverfitRun>) -> Check {
    let cfg = overfit_config();
    cfg.validate().map_err(err)?;
    let data = root.join("data");
    let clips = gen_data(&cfg, &data).map_err(err)?;
    let start = Instant::now();
    let out = train(&cfg, &data, &root.join("full")).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(
        out.logs.iter().all(|l| l.loss.is_finite()),
        "non-finite loss",
    )?;
    let (first, last, ratio) = loss_ratio(&out.logs);
    let detail = format!(
        "{} params, {} steps, first-{LOSS_WINDOW} mean {first:.4}, last-{LOSS_WINDOW} mean {last:.4}, ratio {ratio:.4} (max {OVERFIT_RATIO}), {:.0}s",
        out.model.store.count(),
        out.logs.len(),
        elapsed.as_secs_f64()
    );
    *run = Some(OverfitRun {
        cfg,
        model: out.model,
        clips,
        logs: out.logs,
    });
    ensure(ratio <= OVERFIT_RATIO, detail.clone())?;
    ensure(
        elapsed < OVERFIT_BUDGET,
        format!("{detail}; over the time budget"),
    )?;
    Ok(detail)
}

fn control_sensitivity(root: &Path, run: &Option<OverfitRun>) -> Check {
    let run = run.as_ref().ok_or("needs the overfit model")?;
    let n = run.clips.len();
    let matched: Vec<SampleRequest> = run
        .clips
        .iter()
        .map(|c| SampleRequest::from_clip(&c.id, c))
        .collect();
    let swapped: Vec<SampleRequest> = (0..n)
        .map(|a| SampleRequest::from_clip(&run.clips[a].id, &run.clips[(a + 1) % n]))
        .collect();
    let (dm, ds) = (root.join("matched"), root.join("swapped"));
    sample(&run.cfg, &run.model, &matched, &dm).map_err(err)?;
    sample(&run.cfg, &run.model, &swapped, &ds).map_err(err)?;
    let data = root.join("data");
    let (rm, rs) = (
        eval(&dm, &data).map_err(err)?.report,
        eval(&ds, &data).map_err(err)?.report,
    );
    let lookup = |r: &tokenmotion_core::metrics::MetricReport, metric: &str, id: &str| {
        r.values[metric]
            .iter()
            .find(|(s, _)| s == id)
            .map(|(_, v)| *v)
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for clip in &run.clips {
        let id = clip.id.as_str();
        let get = |r, m| lookup(r, m, id).ok_or(format!("{m} undefined for {id}"));
        let (pm, ps) = (get(&rm, "pose_err")?, get(&rs, "pose_err")?);
        let (tm, ts) = (get(&rm, "trans_err")?, get(&rs, "trans_err")?);
        if pm < ps && tm < ts {
            wins += 1;
        }
        rows.push(format!("{id}: pose {pm:.2}/{ps:.2} trans {tm:.3}/{ts:.3}"));
    }
    let detail = format!(
        "{wins}/{n} clips won (matched/swapped: {})",
        rows.join("; ")
    );
    ensure(wins >= MIN_CONTROL_WINS, detail.clone())?;
    Ok(detail)
}

fn ablations(root: &Path, run: &Option<OverfitRun>) -> Check {
    let run = run.as_ref().ok_or("needs the overfit run")?;
    let base = &run.cfg;
    let mut variants: Vec<(&str, RunConfig)> = Vec::new();
    let mut add = base.clone();
    add.model.fuse_mode = FuseMode::Add;
    variants.push(("fuse_mode=add", add));
    let mut controlnet = base.clone();
    controlnet.model.encoder = EncoderKind::ControlNet;
    variants.push(("encoder=controlnet", controlnet));
    let mut no_prior = base.clone();
    no_prior.model.use_prior = false;
    variants.push(("use_prior=false", no_prior));

    let mut curves: Vec<(String, Vec<StepLog>)> = vec![("full".into(), run.logs.clone())];
    for (name, cfg) in variants {
        let out =
            train(&cfg, &root.join("data"), &root.join(name.replace('=', "-"))).map_err(err)?;
        ensure(
            out.logs.iter().all(|l| l.loss.is_finite()),
            format!("{name}: non-finite loss"),
        )?;
        ensure(
            out.logs.len() == OVERFIT_STEPS,
            format!("{name}: stopped after {} steps", out.logs.len()),
        )?;
        curves.push((name.to_string(), out.logs));
    }
    let windows = 10;
    let span = OVERFIT_STEPS / windows;
    print!("    {:<20}", "steps");
    for i in 0..windows {
        print!(" {:>9}", format!("{}-{}", i * span, (i + 1) * span));
    }
    println!(" {:>9}", "ratio");
    for (name, logs) in &curves {
        print!("    {name:<20}");
        for i in 0..windows {
            print!(" {:>9.4}", window_mean(logs, i * span..(i + 1) * span));
        }
        println!(" {:>9.4}", loss_ratio(logs).2);
    }
    Ok(format!(
        "{} variants completed {OVERFIT_STEPS} steps with finite losses",
        curves.len()
    ))
}

// 8

fn orbit(frames: usize, rng: &mut Rng) -> CameraTrajectory {
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let rate = 0.2 * rng.normal();
    let step = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let frames = (0..frames)
        .map(|i| CameraFrame {
            timestamp: i as u64,
            intrinsics: Intrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap(),
            extrinsics: Extrinsics::new(
                rotation_about(axis, rate * i as f64),
                step * i as f64 + Vector3::new(0.1 * rng.normal(), 0.1 * rng.normal(), 0.0),
            )
            .unwrap(),
        })
        .collect();
    CameraTrajectory::new(frames).unwrap()
}

/// World moved by `x -> s R x + t`: each world-to-camera map becomes
/// `(R_c R^T, s t_c - R_c R^T t)` up to the global scale `s`.
fn move_world(
    traj: &CameraTrajectory,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    s: f64,
) -> CameraTrajectory {
    let mut out = traj.clone();
    for f in &mut out.frames {
        let rc = f.extrinsics.rotation * r.transpose();
        f.extrinsics = Extrinsics::new(rc, s * f.extrinsics.translation - rc * t).unwrap();
    }
    out
}

fn metric_suite(root: &Path) -> Check {
    let data = root.join("data");
    let report = eval(&data, &data).map_err(err)?.report;
    for name in METRIC_NAMES {
        let m = report.mean(name).ok_or(format!("{name} undefined"))?;
        ensure(m == 0.0, format!("eval(x, x) gives {name} = {m}"))?;
    }
    let mut rng = Rng::new(8);
    let mut worst = 0.0f64;
    for _ in 0..RIGID_CASES {
        let (gt, est) = (orbit(5, &mut rng), orbit(5, &mut rng));
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let r = rotation_about(axis, (rng.uniform() * 2.0 - 1.0) * std::f64::consts::PI);
        let t = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 3.0;
        let s = 0.5 + 2.0 * rng.uniform();
        let (gt2, est2) = (move_world(&gt, &r, &t, s), move_world(&est, &r, &t, s));
        let d_rot = rot_err(&gt, &est).map_err(err)? - rot_err(&gt2, &est2).map_err(err)?;
        let d_trans = trans_err(&gt, &est).map_err(err)? - trans_err(&gt2, &est2).map_err(err)?;
        worst = worst.max(d_rot.abs()).max(d_trans.abs());
    }
    ensure(
        worst < RIGID_TOL,
        format!("rigid invariance off by {worst:.2e}"),
    )?;
    Ok(format!(
        "eval(x, x) = 0 on {} clips for all five metrics; {RIGID_CASES} rigid transforms, worst {worst:.1e} (tol {RIGID_TOL:e})",
        report.sample_count()
    ))
}

// 9

fn checksum(path: &Path) -> std::result::Result<(Vec<u8>, u64), String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    Ok((bytes, h.finish()))
}

fn determinism(root: &Path) -> Check {
    let mut cfg = overfit_config();
    cfg.model.width = 12;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.model.lora_rank = 2;
    cfg.train_steps = 20;
    cfg.checkpoint_every = 10;
    cfg.sample_steps = 5;
    cfg.seed = 17;
    let data = root.join("det-data");
    let clips = gen_data(&cfg, &data).map_err(err)?;
    let requests = vec![SampleRequest::from_clip(&clips[0].id, &clips[0])];
    let mut sums = Vec::new();
    let mut files = Vec::new();
    for rerun in 0..2 {
        let dir = root.join(format!("det-{rerun}"));
        let out = train(&cfg, &data, &dir).map_err(err)?;
        sample(&cfg, &out.model, &requests, &dir.join("samples")).map_err(err)?;
        let paths = [
            dir.join(LOSS_LOG),
            out.checkpoint.join("params.ten1"),
            clip_paths(&dir.join("samples"), &clips[0].id).video,
        ];
        let run: Vec<(Vec<u8>, u64)> = paths
            .iter()
            .map(|p| checksum(p))
            .collect::<std::result::Result<_, _>>()?;
        sums.push(run.iter().map(|(_, h)| *h).collect::<Vec<_>>());
        files.push(run);
    }
    for (i, name) in ["loss.log", "params.ten1", "sample video"]
        .iter()
        .enumerate()
    {
        ensure(
            files[0][i].0 == files[1][i].0,
            format!("{name} differs between reruns"),
        )?;
    }
    Ok(format!(
        "loss.log {:016x}, params {:016x}, sample {:016x} identical across reruns",
        sums[0][0], sums[0][1], sums[0][2]
    ))
}

// 10

fn synthetic_trajectory_file(lines: usize) -> String {
    let mut s = String::from("synthetic_clip\n");
    for i in 0..lines {
        let r = rotation_about(Vector3::new(0.3, 1.0, 0.1), 0.05 * i as f64);
        let t = Vector3::new(0.1 * i as f64, -0.02 * i as f64, 0.3 + 0.01 * i as f64);
        s.push_str(&format!("{} 0.53 0.94 0.5 0.49 0 0", 33366 * i));
        for row in 0..3 {
            s.push_str(&format!(
                " {} {} {} {}",
                r[(row, 0)],
                r[(row, 1)],
                r[(row, 2)],
                t[row]
            ));
        }
        s.push('\n');
    }
    s
}

fn parser() -> Check {
    let text = synthetic_trajectory_file(20);
    let (id, a) = parse_trajectory_file(&text).map_err(err)?;
    ensure(a.len() == 20, format!("parsed {} frames", a.len()))?;
    let (_, b) = parse_trajectory_file(&serialize_trajectory(&id, &a)).map_err(err)?;
    let mut worst = 0.0f64;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        ensure(x.timestamp == y.timestamp, "timestamp changed")?;
        let (kx, ky) = (&x.intrinsics, &y.intrinsics);
        worst = worst
            .max((x.extrinsics.rotation - y.extrinsics.rotation).abs().max())
            .max(
                (x.extrinsics.translation - y.extrinsics.translation)
                    .abs()
                    .max(),
            )
            .max((kx.fx - ky.fx).abs().max((kx.fy - ky.fy).abs()))
            .max((kx.cx - ky.cx).abs().max((kx.cy - ky.cy).abs()));
    }
    ensure(
        worst <= PARSER_TOL,
        format!("round trip off by {worst:.2e}"),
    )?;

    let good: Vec<&str> = text.lines().collect();
    let breakages = [
        "0 0.5 0.5 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1",
        "0 0.5 0.5 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 x 0",
        "0 -0.5 0.5 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 0",
    ];
    let mut checked = 0;
    for (k, broken) in breakages.iter().enumerate() {
        for line in [2, 7 + k, 21] {
            let mut lines = good.clone();
            lines[line - 1] = broken;
            match parse_trajectory_file(&lines.join("\n")) {
                Err(CoreError::Parse { line: got, .. }) => ensure(
                    got == line,
                    format!("error at line {line} reported as {got}"),
                )?,
                other => return Err(format!("line {line} not rejected: {:?}", other.map(|_| ()))),
            }
            checked += 1;
        }
    }
    Ok(format!("20-line round trip worst {worst:.1e} (tol {PARSER_TOL:e}); {checked} malformed lines located"))
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let root = root.path();
    let only = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut suite = Suite { failed: 0, only };
    let mut run = None;
    suite.run(1, "gradient suite", gradient_suite);
    suite.run(2, "plucker algebra", plucker_algebra);
    suite.run(3, "fusion contracts", fusion_contracts);
    suite.run(4, "causality", causality);
    suite.run(5, "overfit", || overfit(root, &mut run));
    suite.run(6, "control sensitivity", || control_sensitivity(root, &run));
    suite.run(7, "ablations", || ablations(root, &run));
    suite.run(8, "metric suite", || metric_suite(root));
    suite.run(9, "determinism", || determinism(root));
    suite.run(10, "parser", parser);
    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
