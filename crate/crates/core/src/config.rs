//! `key = value` run configuration covering model, data, optimizer,
//! diffusion and ablation settings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use tokenmotion_tensor::AdamConfig;

use crate::backbone::ModelConfig;
use crate::camera::RayConvention;
use crate::diffusion::{DenoiserConfig, DEFAULT_GUIDANCE, DEFAULT_P_DROP, DEFAULT_STEPS};
use crate::error::{CoreError, Result};
use crate::fusion::FuseMode;
use crate::patchify::EncoderKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainMode {
    #[default]
    Full,
    ControlFinetune,
}

impl FromStr for TrainMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "control-finetune" => Ok(Self::ControlFinetune),
            _ => Err(CoreError::Config(format!(
                "mode must be full or control-finetune, got {s:?}"
            ))),
        }
    }
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ControlFinetune => "control-finetune",
        }
    }
}

/// Learning-rate multiplier over a run of `train_steps` steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down to `lr_floor`.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(CoreError::Config(format!(
                "lr_schedule must be constant or cosine, got {s:?}"
            ))),
        }
    }
}

impl LrSchedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }

    pub fn factor(&self, step: usize, total: usize, floor: f64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                let x = (step as f64 / total.max(1) as f64).min(1.0);
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub lr_floor: f64,
    pub denoiser: DenoiserConfig,
    pub batch_size: usize,
    pub train_steps: usize,
    pub checkpoint_every: usize,
    pub p_drop: f64,
    pub sample_steps: usize,
    pub guidance: f64,
    pub mode: TrainMode,
    pub ray_convention: RayConvention,
    pub clips: usize,
    pub camera_only_fraction: f64,
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            lr_floor: 0.05,
            denoiser: DenoiserConfig::default(),
            batch_size: 2,
            train_steps: 1000,
            checkpoint_every: 500,
            p_drop: DEFAULT_P_DROP,
            sample_steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            mode: TrainMode::Full,
            ray_convention: RayConvention::Paper,
            clips: 8,
            camera_only_fraction: 0.25,
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| CoreError::Parse {
        line,
        msg: format!("invalid value {value:?} for {key}"),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CoreError::Parse {
            line,
            msg: format!("{key} must be true or false, got {value:?}"),
        }),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| CoreError::Parse {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CoreError::Parse {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        match key {
            "dim" => m.width = parse(key, value, line)?,
            "heads" => m.heads = parse(key, value, line)?,
            "blocks" => m.blocks = parse(key, value, line)?,
            "p" => m.p = parse(key, value, line)?,
            "q" => m.q = parse(key, value, line)?,
            "lora_rank" => m.lora_rank = parse(key, value, line)?,
            "dilate_radius" => m.dilate_radius = parse(key, value, line)?,
            "frames" => m.frames = parse(key, value, line)?,
            "height" => m.height = parse(key, value, line)?,
            "width" => m.width_px = parse(key, value, line)?,
            "fuse_mode" => m.fuse_mode = value.parse()?,
            "use_prior" => m.use_prior = parse_bool(key, value, line)?,
            "encoder" => m.encoder = value.parse::<EncoderKind>()?,
            "lr" => self.adam.lr = parse(key, value, line)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "lr_floor" => self.lr_floor = parse(key, value, line)?,
            "beta1" => self.adam.beta1 = parse(key, value, line)?,
            "beta2" => self.adam.beta2 = parse(key, value, line)?,
            "adam_eps" => self.adam.eps = parse(key, value, line)?,
            "sigma_data" => self.denoiser.sigma_data = parse(key, value, line)?,
            "sigma_min" => self.denoiser.sigma_min = parse(key, value, line)?,
            "sigma_max" => self.denoiser.sigma_max = parse(key, value, line)?,
            "p_mean" => self.denoiser.p_mean = parse(key, value, line)?,
            "p_std" => self.denoiser.p_std = parse(key, value, line)?,
            "batch_size" => self.batch_size = parse(key, value, line)?,
            "train_steps" => self.train_steps = parse(key, value, line)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value, line)?,
            "p_drop" => self.p_drop = parse(key, value, line)?,
            "sample_steps" => self.sample_steps = parse(key, value, line)?,
            "guidance" => self.guidance = parse(key, value, line)?,
            "mode" => self.mode = value.parse()?,
            "ray_convention" => self.ray_convention = value.parse()?,
            "clips" => self.clips = parse(key, value, line)?,
            "camera_only_fraction" => self.camera_only_fraction = parse(key, value, line)?,
            "seed" => self.seed = parse(key, value, line)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => {
                return Err(CoreError::Parse {
                    line,
                    msg: format!("unknown key {key}"),
                })
            }
        }
        Ok(())
    }

    /// Checks every constraint before any model state is allocated.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.denoiser.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
        {
            return Err(CoreError::Config(format!(
                "invalid optimizer settings {a:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(CoreError::Config(format!(
                "lr_floor must lie in [0, 1], got {}",
                self.lr_floor
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(CoreError::Config(format!(
                "p_drop must lie in [0, 1), got {}",
                self.p_drop
            )));
        }
        if self.sample_steps == 0 {
            return Err(CoreError::Config("sample_steps must be >= 1".into()));
        }
        if !self.guidance.is_finite() {
            return Err(CoreError::Config("guidance must be finite".into()));
        }
        if self.clips == 0 {
            return Err(CoreError::Config("clips must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.camera_only_fraction) {
            return Err(CoreError::Config(format!(
                "camera_only_fraction must lie in [0, 1], got {}",
                self.camera_only_fraction
            )));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let fuse = match m.fuse_mode {
            FuseMode::Softmax => "softmax",
            FuseMode::Add => "add",
        };
        let encoder = match m.encoder {
            EncoderKind::Patchify => "patchify",
            EncoderKind::ControlNet => "controlnet",
        };
        let ray = match self.ray_convention {
            RayConvention::Paper => "paper",
            RayConvention::Classic => "classic",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("dim", m.width.to_string()),
            ("heads", m.heads.to_string()),
            ("blocks", m.blocks.to_string()),
            ("p", m.p.to_string()),
            ("q", m.q.to_string()),
            ("lora_rank", m.lora_rank.to_string()),
            ("dilate_radius", m.dilate_radius.to_string()),
            ("frames", m.frames.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width_px.to_string()),
            ("fuse_mode", fuse.to_string()),
            ("use_prior", m.use_prior.to_string()),
            ("encoder", encoder.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("lr_schedule", self.lr_schedule.as_str().to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("sigma_data", self.denoiser.sigma_data.to_string()),
            ("sigma_min", self.denoiser.sigma_min.to_string()),
            ("sigma_max", self.denoiser.sigma_max.to_string()),
            ("p_mean", self.denoiser.p_mean.to_string()),
            ("p_std", self.denoiser.p_std.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("p_drop", self.p_drop.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("guidance", self.guidance.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("ray_convention", ray.to_string()),
            ("clips", self.clips.to_string()),
            (
                "camera_only_fraction",
                self.camera_only_fraction.to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.clone()),
            ("out_dir", self.out_dir.clone()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
