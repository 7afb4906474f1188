//! Finite-difference verification of every primitive and composite block at
//! toy sizes. Zero-initialized factors (LoRA `B`, adaLN modulation) are
//! randomized first so that every path carries gradient.

use tokenmotion_tensor::{
    grad_check, nn, projection_weights, GradCheckOptions, Rng, Tape, Tensor, TensorError, Var,
};

use crate::backbone::{dit_block, Conditions, Model, ModelConfig};
use crate::diffusion::{precondition, DenoiserConfig};
use crate::error::{CoreError, Result};
use crate::fusion::{self, FuseMode, FusionBlockParams, SelfAttentionParams};
use crate::params::{Bound, Init, ParamStore, Role};
use crate::patchify::{
    controlnet_style_encode, patchify_motion, ControlNetParams, EncoderShape, MotionTokens,
    PatchifyParams, TokenGrid,
};
use crate::pose;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} {:>4} max_rel_err={:.3e} tol={:.0e} coords={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checked
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negative control: corrupt one analytic gradient entry per check.
    pub corrupt: bool,
}

fn to_tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Config(other.to_string()),
    }
}

/// Entries with magnitude in `[0.1, 2]` and random sign.
pub fn random_input(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 2.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn project<'t>(out: Var<'t>, seed: u64) -> tokenmotion_tensor::Result<Var<'t>> {
    let w = out.tape().constant(projection_weights(&out.shape(), seed));
    out.mul(&w)?.sum()
}

fn options(opts: &SuiteOptions, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        max_coords,
        seed: opts.seed,
        corrupt: opts.corrupt,
        ..GradCheckOptions::default()
    }
}

fn primitive<F>(name: &str, inputs: Vec<Tensor>, opts: &SuiteOptions, f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> tokenmotion_tensor::Result<Var<'t>>,
{
    let seed = opts.seed;
    let r = grad_check(
        |tape, v| project(f(tape, v)?, seed),
        &inputs,
        &options(opts, None),
    )?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        tolerance: PRIMITIVE_TOL,
        checked: r.checked,
    })
}

/// Checks a block over all parameters in `store` plus `extra` inputs.
fn block<F>(
    name: &str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    tolerance: f64,
    max_coords: Option<usize>,
    opts: &SuiteOptions,
    f: F,
) -> Result<CheckResult>
where
    F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.extend(extra);
    let seed = opts.seed;
    let r = grad_check(
        |_, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            project(f(&bound, &v[n..]).map_err(to_tensor_err)?, seed)
        },
        &inputs,
        &options(opts, max_coords),
    )?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        tolerance,
        checked: r.checked,
    })
}

fn randomize(store: &mut ParamStore, pick: impl Fn(&str) -> bool, std: f64, seed: u64) {
    for (_, p) in store.iter_mut() {
        if pick(&p.name) {
            p.value = Rng::stream(seed, &format!("randomize.{}", p.name))
                .normal_tensor(p.value.shape(), std);
        }
    }
}

fn primitives(opts: &SuiteOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut r = Vec::new();
    r.push(primitive(
        "matmul",
        vec![random_input(&[3, 4], rng), random_input(&[4, 2], rng)],
        opts,
        |_, v| v[0].matmul(&v[1]),
    )?);
    r.push(primitive(
        "conv2d",
        vec![
            random_input(&[2, 2, 5, 5], rng),
            random_input(&[3, 2, 3, 3], rng),
            random_input(&[3], rng),
        ],
        opts,
        |_, v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1),
    )?);
    r.push(primitive(
        "causal_conv3d",
        vec![
            random_input(&[2, 4, 2, 3], rng),
            random_input(&[3, 2, 3, 1, 1], rng),
            random_input(&[3], rng),
        ],
        opts,
        |_, v| v[0].causal_conv3d(&v[1], Some(&v[2]), 2),
    )?);
    r.push(primitive(
        "layer_norm",
        vec![
            random_input(&[3, 5], rng),
            random_input(&[5], rng),
            random_input(&[5], rng),
        ],
        opts,
        |_, v| nn::layer_norm(&v[0], &v[1], &v[2], 1e-6),
    )?);
    for axis in 0..2 {
        r.push(primitive(
            &format!("softmax(axis={axis})"),
            vec![random_input(&[3, 4], rng)],
            opts,
            move |_, v| v[0].softmax(axis),
        )?);
    }
    r.push(primitive(
        "standardize",
        vec![random_input(&[2, 6], rng)],
        opts,
        |_, v| v[0].standardize(),
    )?);
    r.push(primitive(
        "attention(2 heads)",
        vec![
            random_input(&[3, 4], rng),
            random_input(&[5, 4], rng),
            random_input(&[5, 4], rng),
        ],
        opts,
        |_, v| nn::multi_head_attention(&v[0], &v[1], &v[2], 2),
    )?);
    Ok(r)
}

const D: usize = 12;
const HEADS: usize = 2;

fn encoder_shape(channels: usize) -> EncoderShape {
    EncoderShape {
        channels,
        width: D,
        p: 2,
        q: 2,
    }
}

fn composites(opts: &SuiteOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut r = Vec::new();
    let seed = opts.seed;

    let mut store = ParamStore::new();
    let params = PatchifyParams::init(
        &mut Init::new(&mut store, seed, Role::Encoder, ""),
        encoder_shape(3),
    );
    randomize(&mut store, |n| n.ends_with("_b"), 0.3, seed);
    r.push(block(
        "patchify stack",
        &store,
        vec![random_input(&[3, 4, 4, 4], rng)],
        BLOCK_TOL,
        None,
        opts,
        |b, v| Ok(patchify_motion(&v[0], &params, b)?.tokens),
    )?);

    let mut store = ParamStore::new();
    let params = ControlNetParams::init(
        &mut Init::new(&mut store, seed, Role::Encoder, ""),
        encoder_shape(3),
    );
    r.push(block(
        "controlnet encoder",
        &store,
        vec![random_input(&[3, 4, 4, 4], rng)],
        BLOCK_TOL,
        Some(12),
        opts,
        |b, v| Ok(controlnet_style_encode(&v[0], &params, b)?.tokens),
    )?);

    let grid = TokenGrid { t: 2, h: 2, w: 2 };
    let l = grid.len();

    let mut store = ParamStore::new();
    let params = SelfAttentionParams::init(&mut Init::new(&mut store, seed, Role::Fusion, ""), D);
    r.push(block(
        "motion self-attention",
        &store,
        vec![random_input(&[l, D], rng)],
        BLOCK_TOL,
        None,
        opts,
        |b, v| {
            let z = MotionTokens { tokens: v[0], grid };
            Ok(fusion::motion_self_attention(&z, &params, HEADS, b)?.tokens)
        },
    )?);

    let mut prior = Tensor::zeros(&[1, 2, 2, 2]);
    prior.data_mut()[1] = 1.0;
    prior.data_mut()[6] = 1.0;
    for (name, mode) in [
        ("fusion block", FuseMode::Softmax),
        ("fusion block (add)", FuseMode::Add),
    ] {
        let mut store = ParamStore::new();
        let params = FusionBlockParams::init(
            &mut Init::new(&mut store, seed, Role::Fusion, ""),
            D,
            HEADS,
            2,
        )?;
        randomize(&mut store, |n| n == "lora_b" || n == "bv", 0.5, seed);
        let prior = prior.clone();
        r.push(block(
            name,
            &store,
            vec![
                random_input(&[l, D], rng),
                random_input(&[l, D], rng),
                random_input(&[5, D], rng),
            ],
            BLOCK_TOL,
            Some(16),
            opts,
            move |b, v| {
                let zp = MotionTokens { tokens: v[0], grid };
                let zc = MotionTokens { tokens: v[1], grid };
                let out = fusion::fuse_block(&zp, &zc, &prior, mode, &params, b)?;
                Ok(fusion::inject(&v[2], &out.fused.tokens, &params, b)?)
            },
        )?);
    }

    let mut store = ParamStore::new();
    let params = crate::backbone::DiTBlockParams::init(
        &mut Init::new(&mut store, seed, Role::Backbone, ""),
        D,
    );
    randomize(
        &mut store,
        |n| n.starts_with("mod_") || n.starts_with("mlp_b"),
        0.3,
        seed,
    );
    r.push(block(
        "dit block",
        &store,
        vec![
            random_input(&[3, D], rng),
            random_input(&[l, D], rng),
            random_input(&[1, D], rng),
        ],
        BLOCK_TOL,
        Some(16),
        opts,
        |b, v| {
            let (p, z) = dit_block(&v[0], &v[1], &v[2], &params, HEADS, b)?;
            let tape = p.tape();
            Ok(tape.concat(&[p, z], 0)?)
        },
    )?);
    Ok(r)
}

/// Configuration of the full-model check: 4 frames of 8 x 8.
pub fn full_model_config() -> ModelConfig {
    ModelConfig {
        width: D,
        heads: HEADS,
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

fn full_model(opts: &SuiteOptions, rng: &mut Rng) -> Result<CheckResult> {
    let mut model = Model::new(full_model_config(), opts.seed)?;
    randomize(
        &mut model.store,
        |n| n.ends_with("lora_b") || n.contains("mod_") || n.ends_with("bv"),
        0.3,
        opts.seed,
    );
    let cfg = &model.config;
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width_px);
    let walker = pose::MotionSpec {
        path: pose::PathSpec::Line {
            start: (3.0, 5.0),
            velocity: (0.5, 0.0),
        },
        gait_amplitude: 0.5,
        gait_frequency: 0.2,
        body_height: 5.0,
    };
    let skeletons: Vec<_> = pose::synth_skeleton_sequence(opts.seed, t, &walker)
        .into_iter()
        .map(|s| vec![s])
        .collect();
    let cond = Conditions {
        prompt: "a person walking".into(),
        camera: random_input(&[6, t, h, w], rng),
        pose: pose::rasterize(&skeletons, h, w),
    };
    let video = random_input(&model.config.video_shape(), rng);
    let denoiser = DenoiserConfig::default();
    let model = &model;
    block(
        "full model",
        &model.store,
        vec![video],
        MODEL_TOL,
        Some(3),
        opts,
        |b, v| {
            precondition(&v[0], 0.7, &denoiser, |x, c| {
                model.forward(b, x, c, &cond, true)
            })
        },
    )
}

/// Runs every check. The caller decides how to report failures.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::stream(opts.seed, "gradsuite");
    let mut results = primitives(opts, &mut rng)?;
    results.extend(composites(opts, &mut rng)?);
    results.push(full_model(opts, &mut rng)?);
    Ok(results)
}
