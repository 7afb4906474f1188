//! Subcommand implementations. Each is a pure function of the run config,
//! the seed and its input files, so reruns reproduce outputs byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tokenmotion_core::backbone::{Conditions, Model};
use tokenmotion_core::camera::{parse_trajectory_file, plucker_map, CameraTrajectory};
use tokenmotion_core::checkpoint;
use tokenmotion_core::config::RunConfig;
use tokenmotion_core::data::{
    self, clip_paths, generate_dataset, load_dataset, save_dataset, Clip,
};
use tokenmotion_core::diffusion::{sample as run_sampler, SampleOptions};
use tokenmotion_core::gradsuite::{run_suite, CheckResult, SuiteOptions};
use tokenmotion_core::metrics::{nearest_reference, MetricReport, SamplePair};
use tokenmotion_core::pose::{parse_skeletons, SkeletonSequence};
use tokenmotion_core::train::{Example, StepLog, TrainSettings, Trainer};
use tokenmotion_core::{CoreError, Result};
use tokenmotion_tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

pub const LOSS_LOG: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.txt";

/// Validation failures are problems with the inputs; everything else is a
/// runtime failure.
pub fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_)
        | CoreError::Parse { .. }
        | CoreError::Validation(_)
        | CoreError::Domain(_)
        | CoreError::DegenerateRay { .. }
        | CoreError::Checkpoint(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Defaults, then the config file, then a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<Clip>> {
    let m = &cfg.model;
    let clips = generate_dataset(
        cfg.seed,
        cfg.clips,
        cfg.camera_only_fraction,
        m.frames,
        m.height,
        m.width_px,
    )?;
    save_dataset(out, &clips)?;
    Ok(clips)
}

fn check_clip_dims(cfg: &RunConfig, clip: &Clip) -> Result<()> {
    let want = cfg.model.video_shape();
    if clip.video.shape() != want {
        return Err(CoreError::Validation(format!(
            "clip {} has shape {:?}, config expects {:?}",
            clip.id,
            clip.video.shape(),
            want
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub model: Model,
    pub checkpoint: PathBuf,
}

/// Trains on the dataset in `data_dir`. Writes `loss.log` (one line per
/// step), `checkpoints/step-NNNNNN` every `checkpoint_every` steps and the
/// final weights in `checkpoint/`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    let clips = load_dataset(data_dir)?;
    for c in &clips {
        check_clip_dims(cfg, c)?;
    }
    let examples = clips
        .iter()
        .map(|c| Example::from_clip(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let log_path = out.join(LOSS_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
    let mut trainer = Trainer::new(TrainSettings::from_config(cfg));
    let logs = trainer.run(&mut model, &examples, cfg.train_steps, |entry, model| {
        if !entry.loss.is_finite() {
            return Err(CoreError::Training {
                step: entry.step,
                msg: format!("non-finite loss {}", entry.loss),
            });
        }
        writeln!(log, "{}", entry.line()).map_err(|e| CoreError::io(&log_path, e))?;
        let done = entry.step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let dir = out.join("checkpoints").join(format!("step-{done:06}"));
            checkpoint::save(&dir, cfg, &model.store)?;
        }
        Ok(())
    })?;
    let dir = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&dir, cfg, &model.store)?;
    Ok(TrainOutcome {
        logs,
        model,
        checkpoint: dir,
    })
}

/// Conditions for one sample. A missing camera or pose gives the all-zero
/// (null) signal for that channel group.
#[derive(Clone, Debug, Default)]
pub struct SampleRequest {
    pub name: String,
    pub prompt: String,
    pub camera: Option<CameraTrajectory>,
    pub pose: Option<SkeletonSequence>,
}

impl SampleRequest {
    pub fn from_clip(name: &str, clip: &Clip) -> Self {
        Self {
            name: name.to_string(),
            prompt: clip.prompt.clone(),
            camera: Some(clip.trajectory.clone()),
            pose: Some(clip.skeletons.clone()),
        }
    }

    pub fn from_files(
        name: &str,
        prompt: &str,
        camera: Option<&Path>,
        pose: Option<&Path>,
    ) -> Result<Self> {
        let camera = camera
            .map(|p| {
                read(p)
                    .and_then(|t| parse_trajectory_file(&t))
                    .map(|(_, tr)| tr)
            })
            .transpose()?;
        let pose = pose
            .map(|p| read(p).and_then(|t| parse_skeletons(&t)))
            .transpose()?;
        Ok(Self {
            name: name.to_string(),
            prompt: prompt.to_string(),
            camera,
            pose,
        })
    }

    pub fn conditions(&self, cfg: &RunConfig) -> Result<Conditions> {
        let m = &cfg.model;
        let mut cond = Conditions::null(m);
        cond.prompt = self.prompt.clone();
        if let Some(traj) = &self.camera {
            if traj.len() != m.frames {
                return Err(CoreError::Validation(format!(
                    "{}: trajectory has {} frames, config expects {}",
                    self.name,
                    traj.len(),
                    m.frames
                )));
            }
            cond.camera = plucker_map(traj, m.height, m.width_px, cfg.ray_convention)?;
        }
        if let Some(seq) = &self.pose {
            if seq.len() > m.frames {
                return Err(CoreError::Validation(format!(
                    "{}: skeleton file has {} frames, config expects {}",
                    self.name,
                    seq.len(),
                    m.frames
                )));
            }
            cond.pose = data::pose_raster(seq, m.frames, m.height, m.width_px);
        }
        Ok(cond)
    }
}

/// Binary PPM of frame `f` of a `3 x T x H x W` video in `[-1, 1]`.
pub fn frame_ppm(video: &Tensor, f: usize) -> Vec<u8> {
    let s = video.shape();
    let (t, h, w) = (s[1], s[2], s[3]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = video.data()[((c * t + f) * h + y) * w + x];
                out.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Samples each request with the config's step count, guidance and seed.
/// Writes `<name>.video.ten1` and `<name>.fNNN.ppm` frames into `out`.
pub fn sample(
    cfg: &RunConfig,
    model: &Model,
    requests: &[SampleRequest],
    out: &Path,
) -> Result<Vec<Tensor>> {
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let opts = SampleOptions {
        steps: cfg.sample_steps,
        guidance: cfg.guidance,
        seed: cfg.seed,
    };
    let mut videos = Vec::with_capacity(requests.len());
    for req in requests {
        let cond = req.conditions(cfg)?;
        let video = run_sampler(model, &cfg.denoiser, &cond, &opts)?;
        video.save(clip_paths(out, &req.name).video)?;
        for f in 0..cfg.model.frames {
            write(
                &out.join(format!("{}.f{f:03}.ppm", req.name)),
                &frame_ppm(&video, f),
            )?;
        }
        videos.push(video);
    }
    Ok(videos)
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Generated videos without a reference clip of the same id.
    pub unpaired: Vec<String>,
}

/// Camera and pose read off a generated video. Explicit `.traj.txt` and
/// `.skel.txt` files next to the video take precedence; otherwise the
/// reference clip nearest in pixel space stands in for an estimator.
fn estimate(
    dir: &Path,
    id: &str,
    video: &Tensor,
    refs: &[Clip],
) -> Result<(CameraTrajectory, SkeletonSequence)> {
    let p = clip_paths(dir, id);
    if p.trajectory.exists() && p.skeletons.exists() {
        let (_, traj) = parse_trajectory_file(&read(&p.trajectory)?)?;
        let mut skel = parse_skeletons(&read(&p.skeletons)?)?;
        skel.resize(traj.len(), Vec::new());
        return Ok((traj, skel));
    }
    let videos: Vec<&Tensor> = refs.iter().map(|c| &c.video).collect();
    let (i, _) = nearest_reference(video, &videos)?;
    Ok((refs[i].trajectory.clone(), refs[i].skeletons.clone()))
}

/// Scores every `<id>.video.ten1` in `generated` against reference clip `id`.
pub fn eval(generated: &Path, reference: &Path) -> Result<EvalOutcome> {
    let refs = load_dataset(reference)?;
    let mut ids: Vec<String> = fs::read_dir(generated)
        .map_err(|e| CoreError::io(generated, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".video.ten1"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    let mut unpaired = Vec::new();
    let mut estimates = Vec::new();
    for id in &ids {
        let Some(gt) = refs.iter().find(|c| &c.id == id) else {
            unpaired.push(id.clone());
            continue;
        };
        let video = Tensor::load(clip_paths(generated, id).video)?;
        let (traj, skel) = estimate(generated, id, &video, &refs)?;
        estimates.push((gt, traj, skel));
    }
    let pairs: Vec<SamplePair<'_>> = estimates
        .iter()
        .map(|(gt, traj, skel)| {
            let s = gt.video.shape();
            SamplePair {
                name: gt.id.clone(),
                gt_camera: &gt.trajectory,
                est_camera: traj,
                gt_pose: &gt.skeletons,
                est_pose: skel,
                height: s[2],
                width: s[3],
            }
        })
        .collect();
    Ok(EvalOutcome {
        report: MetricReport::evaluate(&pairs)?,
        unpaired,
    })
}

pub fn gradcheck(seed: u64, corrupt: bool) -> Result<Vec<CheckResult>> {
    run_suite(&SuiteOptions { seed, corrupt })
}
