//! Decouple-and-fuse: parallel motion self-attention, learned mask logits
//! with the human prior, per-token softmax fusion of the two streams, and
//! cross-attention plus LoRA injection into the visual tokens.

use tokenmotion_tensor::{nn, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::params::{Bound, Init, ParamId};
use crate::patchify::{MotionTokens, TokenGrid};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FuseMode {
    #[default]
    Softmax,
    Add,
}

impl std::str::FromStr for FuseMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "add" => Ok(Self::Add),
            _ => Err(CoreError::Config(format!(
                "fuse_mode must be softmax or add, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl SelfAttentionParams {
    pub fn init(init: &mut Init<'_>, d: usize) -> Self {
        Self {
            ln_g: init.add("ln_g", Tensor::full(&[d], 1.0)),
            ln_b: init.zeros("ln_b", &[d]),
            wq: init.linear("wq", d, d),
            wk: init.linear("wk", d, d),
            wv: init.linear("wv", d, d),
            wo: init.linear("wo", d, d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlockParams {
    pub width: usize,
    pub heads: usize,
    pub rank: usize,
    pub pose_attn: SelfAttentionParams,
    pub camera_attn: SelfAttentionParams,
    pub mask_pose: ParamId,
    pub mask_camera: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub lora_a: ParamId,
    pub lora_b: ParamId,
}

impl FusionBlockParams {
    pub fn init(init: &mut Init<'_>, width: usize, heads: usize, rank: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(CoreError::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if rank == 0 || rank >= width {
            return Err(CoreError::Config(format!(
                "LoRA rank must satisfy 1 <= r < D, got r={rank}, D={width}"
            )));
        }
        let d = width;
        Ok(Self {
            width,
            heads,
            rank,
            pose_attn: SelfAttentionParams::init(&mut init.scoped("pose_attn"), d),
            camera_attn: SelfAttentionParams::init(&mut init.scoped("camera_attn"), d),
            mask_pose: init.linear("mask_pose", d, 1),
            mask_camera: init.linear("mask_camera", d, 1),
            ln_g: init.add("ln_g", Tensor::full(&[d], 1.0)),
            ln_b: init.zeros("ln_b", &[d]),
            wq: init.linear("wq", d, d),
            wk: init.linear("wk", d, d),
            wv: init.linear("wv", d, d),
            bv: init.zeros("bv", &[d]),
            wo: init.linear("wo", d, d),
            lora_a: init.normal("lora_a", &[d, rank], 1.0 / d as f64),
            lora_b: init.zeros("lora_b", &[rank, d]),
        })
    }
}

fn check_width(z: &Var<'_>, width: usize, what: &str) -> Result<()> {
    let s = z.shape();
    if s.len() != 2 || s[1] != width {
        return Err(CoreError::Config(format!(
            "{what} must be L x {width}, got {s:?}"
        )));
    }
    Ok(())
}

/// Pre-norm multi-head self-attention with residual.
pub fn motion_self_attention<'t>(
    z: &MotionTokens<'t>,
    params: &SelfAttentionParams,
    heads: usize,
    bound: &Bound<'t>,
) -> Result<MotionTokens<'t>> {
    let d = bound[params.wq].shape()[0];
    check_width(&z.tokens, d, "motion tokens")?;
    let h = nn::layer_norm(&z.tokens, &bound[params.ln_g], &bound[params.ln_b], LN_EPS)?;
    let q = h.matmul(&bound[params.wq])?;
    let k = h.matmul(&bound[params.wk])?;
    let v = h.matmul(&bound[params.wv])?;
    let a = nn::multi_head_attention(&q, &k, &v, heads)?.matmul(&bound[params.wo])?;
    Ok(MotionTokens {
        tokens: z.tokens.add(&a)?,
        grid: z.grid,
    })
}

/// Flattened prior `[L]` for a `1 x T' x H' x W'` mask, validated against
/// the token grid.
pub fn flatten_prior(prior: &Tensor, grid: TokenGrid) -> Result<Tensor> {
    if prior.shape() != [1, grid.t, grid.h, grid.w] {
        return Err(CoreError::Config(format!(
            "prior mask {:?} does not match token grid {:?}",
            prior.shape(),
            grid.dims()
        )));
    }
    Ok(prior.clone().reshape(&[grid.len()])?)
}

fn stream_logits<'t>(z: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    let l = z.shape()[0];
    Ok(z.matmul(w)?
        .reshape(&[1, l])?
        .standardize()?
        .reshape(&[l])?)
}

/// Per-token mask logits `(pose, camera)`, each `[L]`: a scalar projection
/// standardized over the token axis, with the prior added to pose only.
pub fn compute_mask_logits<'t>(
    z_pose: &MotionTokens<'t>,
    z_camera: &MotionTokens<'t>,
    prior: &Tensor,
    params: &FusionBlockParams,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if z_pose.grid != z_camera.grid {
        return Err(CoreError::Config(format!(
            "pose grid {:?} differs from camera grid {:?}",
            z_pose.grid, z_camera.grid
        )));
    }
    let prior = flatten_prior(prior, z_pose.grid)?;
    let tape = z_pose.tokens.tape();
    let m_pose =
        stream_logits(&z_pose.tokens, &bound[params.mask_pose])?.add(&tape.constant(prior))?;
    let m_camera = stream_logits(&z_camera.tokens, &bound[params.mask_camera])?;
    Ok((m_pose, m_camera))
}

/// Two-way per-token softmax weights `[L, 2]` (pose, camera).
pub fn fusion_weights<'t>(m_pose: &Var<'t>, m_camera: &Var<'t>) -> Result<Var<'t>> {
    let l = m_pose.numel();
    let tape = m_pose.tape();
    let stacked = tape.concat(&[m_pose.reshape(&[l, 1])?, m_camera.reshape(&[l, 1])?], 1)?;
    Ok(stacked.softmax(1)?)
}

pub fn fuse_tokens<'t>(
    z_pose: &MotionTokens<'t>,
    z_camera: &MotionTokens<'t>,
    m_pose: &Var<'t>,
    m_camera: &Var<'t>,
) -> Result<MotionTokens<'t>> {
    let (ps, cs) = (z_pose.tokens.shape(), z_camera.tokens.shape());
    if ps != cs || m_pose.numel() != ps[0] || m_camera.numel() != ps[0] {
        return Err(CoreError::Config(format!(
            "fusion needs equal token counts, got pose {ps:?}, camera {cs:?}"
        )));
    }
    let w = fusion_weights(m_pose, m_camera)?;
    let alpha = w.narrow(1, 0, 1)?;
    let beta = w.narrow(1, 1, 1)?;
    let fused = z_pose
        .tokens
        .row_scale(&alpha)?
        .add(&z_camera.tokens.row_scale(&beta)?)?;
    Ok(MotionTokens {
        tokens: fused,
        grid: z_pose.grid,
    })
}

pub fn fuse_by_addition<'t>(
    z_pose: &MotionTokens<'t>,
    z_camera: &MotionTokens<'t>,
) -> Result<MotionTokens<'t>> {
    Ok(MotionTokens {
        tokens: z_pose.tokens.add(&z_camera.tokens)?,
        grid: z_pose.grid,
    })
}

/// `z_visual + LoRA(W_O(CrossAttn(Q = visual, K/V = fused)))`.
pub fn inject<'t>(
    z_visual: &Var<'t>,
    z_fused: &Var<'t>,
    params: &FusionBlockParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    check_width(z_visual, params.width, "visual tokens")?;
    check_width(z_fused, params.width, "fused tokens")?;
    let h = nn::layer_norm(z_visual, &bound[params.ln_g], &bound[params.ln_b], LN_EPS)?;
    let q = h.matmul(&bound[params.wq])?;
    let k = z_fused.matmul(&bound[params.wk])?;
    let v = nn::linear(z_fused, &bound[params.wv], Some(&bound[params.bv]))?;
    let a = nn::multi_head_attention(&q, &k, &v, params.heads)?.matmul(&bound[params.wo])?;
    let delta = a
        .matmul(&bound[params.lora_a])?
        .matmul(&bound[params.lora_b])?;
    Ok(z_visual.add(&delta)?)
}

/// Motion streams after one fusion block, plus its fused tokens.
pub struct FusionOutput<'t> {
    pub pose: MotionTokens<'t>,
    pub camera: MotionTokens<'t>,
    pub fused: MotionTokens<'t>,
}

/// Runs the per-stream self-attention and fuses the results.
pub fn fuse_block<'t>(
    z_pose: &MotionTokens<'t>,
    z_camera: &MotionTokens<'t>,
    prior: &Tensor,
    mode: FuseMode,
    params: &FusionBlockParams,
    bound: &Bound<'t>,
) -> Result<FusionOutput<'t>> {
    let pose = motion_self_attention(z_pose, &params.pose_attn, params.heads, bound)?;
    let camera = motion_self_attention(z_camera, &params.camera_attn, params.heads, bound)?;
    let fused = match mode {
        FuseMode::Softmax => {
            let (mp, mc) = compute_mask_logits(&pose, &camera, prior, params, bound)?;
            fuse_tokens(&pose, &camera, &mp, &mc)?
        }
        FuseMode::Add => fuse_by_addition(&pose, &camera)?,
    };
    Ok(FusionOutput {
        pose,
        camera,
        fused,
    })
}
