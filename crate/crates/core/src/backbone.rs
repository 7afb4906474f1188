//! Toy DiT video denoiser: linear patch embedding, factorized 3-D sinusoidal
//! positions, hashed prompt tokens, adaLN-Zero blocks with joint attention
//! over `[prompt; visual]`, fusion injections and a linear decoder.

use tokenmotion_tensor::{nn, Rng, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::fusion::{self, FuseMode, FusionBlockParams};
use crate::params::{orthogonal, Bound, Init, ParamId, ParamStore, Role};
use crate::patchify::{self, EncoderKind, EncoderShape, MotionEncoder, MotionTokens, TokenGrid};
use crate::pose;

pub const PROMPT_SLOTS: usize = 8;
pub const PROMPT_VOCAB: usize = 256;
pub const VIDEO_CHANNELS: usize = 3;
pub const CAMERA_CHANNELS: usize = 6;
pub const POSE_CHANNELS: usize = 3;
const LN_EPS: f64 = 1e-6;
/// Stretches `c_noise` (about [-1.6, 1.1]) over a DiT-like timestep range.
const NOISE_EMBED_SCALE: f64 = 1000.0;

pub type VisualTokens<'t> = MotionTokens<'t>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub p: usize,
    pub q: usize,
    pub lora_rank: usize,
    pub frames: usize,
    pub height: usize,
    pub width_px: usize,
    pub fuse_mode: FuseMode,
    pub use_prior: bool,
    pub encoder: EncoderKind,
    pub dilate_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 96,
            heads: 4,
            blocks: 4,
            p: 4,
            q: 2,
            lora_rank: 4,
            frames: 8,
            height: 32,
            width_px: 32,
            fuse_mode: FuseMode::Softmax,
            use_prior: true,
            encoder: EncoderKind::Patchify,
            dilate_radius: pose::DEFAULT_DILATE_RADIUS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<TokenGrid> {
        let d = self.width;
        if d == 0 || d % 6 != 0 {
            return Err(CoreError::Config(format!(
                "width D={d} must be a positive multiple of 6 for the 3-axis positional encoding"
            )));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "width D={d} not divisible by heads={}",
                self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(CoreError::Config("blocks must be >= 1".into()));
        }
        if self.lora_rank == 0 || self.lora_rank >= d {
            return Err(CoreError::Config(format!(
                "lora_rank must satisfy 1 <= r < D, got {}",
                self.lora_rank
            )));
        }
        TokenGrid::for_raster(self.frames, self.height, self.width_px, self.p, self.q)
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            t: self.frames / self.q,
            h: self.height / self.p,
            w: self.width_px / self.p,
        }
    }

    pub fn patch_dim(&self) -> usize {
        VIDEO_CHANNELS * self.p * self.p * self.q
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [VIDEO_CHANNELS, self.frames, self.height, self.width_px]
    }

    fn encoder_shape(&self, channels: usize) -> EncoderShape {
        EncoderShape {
            channels,
            width: self.width,
            p: self.p,
            q: self.q,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiTBlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    /// `D -> 6D`: shift, scale, gate for attention then for the MLP.
    pub mod_w: ParamId,
    pub mod_b: ParamId,
}

impl DiTBlockParams {
    pub fn init(init: &mut Init<'_>, d: usize) -> Self {
        Self {
            wq: init.linear("wq", d, d),
            wk: init.linear("wk", d, d),
            wv: init.linear("wv", d, d),
            wo: init.linear("wo", d, d),
            mlp_w1: init.linear("mlp_w1", d, 4 * d),
            mlp_b1: init.zeros("mlp_b1", &[4 * d]),
            mlp_w2: init.linear("mlp_w2", 4 * d, d),
            mlp_b2: init.zeros("mlp_b2", &[d]),
            mod_w: init.zeros("mod_w", &[d, 6 * d]),
            mod_b: init.zeros("mod_b", &[6 * d]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub decode_w: ParamId,
    pub decode_b: ParamId,
    pub prompt_table: ParamId,
    pub prompt_slots: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub blocks: Vec<DiTBlockParams>,
    pub final_mod_w: ParamId,
    pub final_mod_b: ParamId,
    pub pose_encoder: MotionEncoder,
    pub camera_encoder: MotionEncoder,
    pub fusion: Vec<FusionBlockParams>,
}

/// Everything the denoiser is conditioned on besides the noisy video.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub prompt: String,
    /// Plücker map `6 x T x H x W`.
    pub camera: Tensor,
    /// Pose raster `3 x T x H x W`.
    pub pose: Tensor,
}

impl Conditions {
    pub fn null(config: &ModelConfig) -> Self {
        let (t, h, w) = (config.frames, config.height, config.width_px);
        Self {
            prompt: String::new(),
            camera: Tensor::zeros(&[CAMERA_CHANNELS, t, h, w]),
            pose: Tensor::zeros(&[POSE_CHANNELS, t, h, w]),
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let pd = config.patch_dim();
        let mut store = ParamStore::new();
        let mut bb = Init::new(&mut store, seed, Role::Backbone, "backbone.");
        let embed = orthogonal(pd, d, &mut Rng::stream(seed, "backbone.embed_w"));
        let decode = transpose(&embed);
        let embed_w = bb.add("embed_w", embed);
        let embed_b = bb.zeros("embed_b", &[d]);
        let decode_w = bb.add("decode_w", decode);
        let decode_b = bb.zeros("decode_b", &[pd]);
        let std = 1.0 / (d as f64).sqrt();
        let prompt_table = bb.normal("prompt_table", &[PROMPT_VOCAB, d], std);
        let prompt_slots = bb.normal("prompt_slots", &[PROMPT_SLOTS, d], std);
        let time_w1 = bb.linear("time_w1", d, d);
        let time_b1 = bb.zeros("time_b1", &[d]);
        let time_w2 = bb.linear("time_w2", d, d);
        let time_b2 = bb.zeros("time_b2", &[d]);
        let blocks = (0..config.blocks)
            .map(|n| DiTBlockParams::init(&mut bb.scoped(&format!("block{n}")), d))
            .collect();
        let final_mod_w = bb.zeros("final_mod_w", &[d, 2 * d]);
        let final_mod_b = bb.zeros("final_mod_b", &[2 * d]);

        let mut enc = Init::new(&mut store, seed, Role::Encoder, "encoder.");
        let pose_encoder = MotionEncoder::init(
            &mut enc.scoped("pose"),
            config.encoder,
            config.encoder_shape(POSE_CHANNELS),
        );
        let camera_encoder = MotionEncoder::init(
            &mut enc.scoped("camera"),
            config.encoder,
            config.encoder_shape(CAMERA_CHANNELS),
        );

        let mut fu = Init::new(&mut store, seed, Role::Fusion, "fusion.");
        let fusion = (0..config.blocks)
            .map(|n| {
                FusionBlockParams::init(
                    &mut fu.scoped(&format!("block{n}")),
                    d,
                    config.heads,
                    config.lora_rank,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            store,
            layout: Layout {
                embed_w,
                embed_b,
                decode_w,
                decode_b,
                prompt_table,
                prompt_slots,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                blocks,
                final_mod_w,
                final_mod_b,
                pose_encoder,
                camera_encoder,
                fusion,
            },
        })
    }

    pub fn null_conditions(&self) -> Conditions {
        Conditions::null(&self.config)
    }

    /// Human-region prior on the token grid, or zeros when disabled.
    pub fn prior(&self, pose_raster: &Tensor) -> Result<Tensor> {
        let g = self.config.grid();
        if !self.config.use_prior {
            return Ok(Tensor::zeros(&[1, g.t, g.h, g.w]));
        }
        pose::prior_mask(pose_raster, g.dims(), self.config.dilate_radius)
    }

    fn check_conditions(&self, cond: &Conditions) -> Result<()> {
        let [_, t, h, w] = self.config.video_shape();
        for (what, tensor, c) in [
            ("camera", &cond.camera, CAMERA_CHANNELS),
            ("pose", &cond.pose, POSE_CHANNELS),
        ] {
            if tensor.shape() != [c, t, h, w] {
                return Err(CoreError::Config(format!(
                    "{what} condition must be {:?}, got {:?}",
                    [c, t, h, w],
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Raw network `F(x; c_noise, conditions)` for a `3 x T x H x W` input that
    /// is already scaled by `c_in`. With `control` false the motion branch is
    /// skipped entirely.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        x: &Var<'t>,
        c_noise: f64,
        cond: &Conditions,
        control: bool,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let l = &self.layout;
        let tape = x.tape();
        if x.shape() != cfg.video_shape() {
            return Err(CoreError::Config(format!(
                "video must be {:?}, got {:?}",
                cfg.video_shape(),
                x.shape()
            )));
        }
        self.check_conditions(cond)?;
        let visual = embed_video(x, &bound[l.embed_w], &bound[l.embed_b], cfg.p, cfg.q)?;
        let grid = visual.grid;
        let pe = tape.constant(positional_encoding(grid, cfg.width)?);
        let mut z = visual.tokens.add(&pe)?;
        let mut prompt =
            prompt_embedding(&cond.prompt, &bound[l.prompt_table], &bound[l.prompt_slots])?;
        let t_emb = timestep_embedding(
            tape,
            c_noise,
            cfg.width,
            [
                &bound[l.time_w1],
                &bound[l.time_b1],
                &bound[l.time_w2],
                &bound[l.time_b2],
            ],
        )?;
        let c = t_emb.silu()?;

        let mut streams = if control {
            let prior = self.prior(&cond.pose)?;
            let pose_raster = tape.constant(cond.pose.clone());
            let cam_raster = tape.constant(cond.camera.clone());
            let mut pose = l.pose_encoder.encode(&pose_raster, bound)?;
            let mut camera = l.camera_encoder.encode(&cam_raster, bound)?;
            pose.tokens = pose.tokens.add(&pe)?;
            camera.tokens = camera.tokens.add(&pe)?;
            Some((pose, camera, prior))
        } else {
            None
        };

        for (n, block) in l.blocks.iter().enumerate() {
            let (p2, z2) = dit_block(&prompt, &z, &c, block, cfg.heads, bound)?;
            prompt = p2;
            z = z2;
            if let Some((pose, camera, prior)) = streams.as_mut() {
                let fusion_params = &l.fusion[n];
                let out =
                    fusion::fuse_block(pose, camera, prior, cfg.fuse_mode, fusion_params, bound)?;
                z = fusion::inject(&z, &out.fused.tokens, fusion_params, bound)?;
                *pose = out.pose;
                *camera = out.camera;
            }
        }

        let m = nn::linear(&c, &bound[l.final_mod_w], Some(&bound[l.final_mod_b]))?;
        let d = cfg.width;
        let h = modulate(
            &z.normalize(LN_EPS)?,
            &m.narrow(1, 0, d)?,
            &m.narrow(1, d, d)?,
        )?;
        let rows = nn::linear(&h, &bound[l.decode_w], Some(&bound[l.decode_b]))?;
        decode_patches(&rows, cfg)
    }

    /// Evaluates the network on constant inputs (no gradients).
    pub fn apply(
        &self,
        x: &Tensor,
        c_noise: f64,
        cond: &Conditions,
        control: bool,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        Ok(self.forward(&bound, &xv, c_noise, cond, control)?.value())
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(&[c, r], |i| m.data()[(i % r) * c + i / r])
}

/// Non-overlapping `q x p x p` patches embedded linearly to width D.
pub fn embed_video<'t>(
    x: &Var<'t>,
    w: &Var<'t>,
    b: &Var<'t>,
    p: usize,
    q: usize,
) -> Result<VisualTokens<'t>> {
    let (rows, grid) = patchify::patches(x, p, q)?;
    Ok(MotionTokens {
        tokens: nn::linear(&rows, w, Some(b))?,
        grid,
    })
}

/// Scatters `L x P` patch rows back to a `3 x T x H x W` video.
pub fn decode_patches<'t>(rows: &Var<'t>, cfg: &ModelConfig) -> Result<Var<'t>> {
    let [c, t, h, w] = cfg.video_shape();
    let flat = rows.reshape(&[rows.numel()])?;
    let idx = patchify::unpatch_index(c, t, h, w, cfg.p, cfg.q);
    Ok(flat.gather(idx, &[c, t, h, w])?)
}

/// Factorized sinusoidal encoding: D/3 channels per axis (t, h, w), each
/// split into sines then cosines over geometric frequencies.
pub fn positional_encoding(grid: TokenGrid, d: usize) -> Result<Tensor> {
    if d == 0 || d % 6 != 0 {
        return Err(CoreError::Config(format!(
            "positional encoding width {d} must be a multiple of 6"
        )));
    }
    let k = d / 6;
    let freq = |i: usize| 10000f64.powf(-(i as f64) / k as f64);
    let mut out = Vec::with_capacity(grid.len() * d);
    for t in 0..grid.t {
        for h in 0..grid.h {
            for w in 0..grid.w {
                for pos in [t, h, w] {
                    let pos = pos as f64;
                    out.extend((0..k).map(|i| (pos * freq(i)).sin()));
                    out.extend((0..k).map(|i| (pos * freq(i)).cos()));
                }
            }
        }
    }
    Ok(Tensor::new(vec![grid.len(), d], out)?)
}

/// FNV-1a over the lowercased token, reduced to a table row.
pub fn token_bucket(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % PROMPT_VOCAB as u64) as usize
}

/// `PROMPT_SLOTS x PROMPT_VOCAB` averaging matrix: token `j` goes to slot
/// `j mod 8`, and each slot averages its tokens.
pub fn prompt_matrix(prompt: &str) -> Tensor {
    let mut m = Tensor::zeros(&[PROMPT_SLOTS, PROMPT_VOCAB]);
    let mut counts = [0usize; PROMPT_SLOTS];
    let tokens: Vec<&str> = prompt.split_whitespace().collect();
    for (j, tok) in tokens.iter().enumerate() {
        let slot = j % PROMPT_SLOTS;
        counts[slot] += 1;
        m.data_mut()[slot * PROMPT_VOCAB + token_bucket(tok)] += 1.0;
    }
    for (slot, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in &mut m.data_mut()[slot * PROMPT_VOCAB..(slot + 1) * PROMPT_VOCAB] {
                *v /= n as f64;
            }
        }
    }
    m
}

pub fn prompt_embedding<'t>(prompt: &str, table: &Var<'t>, slots: &Var<'t>) -> Result<Var<'t>> {
    let tape = table.tape();
    Ok(tape
        .constant(prompt_matrix(prompt))
        .matmul(table)?
        .add(slots)?)
}

/// Sinusoidal embedding of `c_noise` followed by a two-layer SiLU MLP.
pub fn timestep_embedding<'t>(
    tape: &'t Tape,
    c_noise: f64,
    d: usize,
    [w1, b1, w2, b2]: [&Var<'t>; 4],
) -> Result<Var<'t>> {
    let half = d / 2;
    let arg = c_noise * NOISE_EMBED_SCALE;
    let emb = Tensor::from_fn(&[1, d], |i| {
        let k = i % half;
        let f = 10000f64.powf(-(k as f64) / half as f64);
        if i < half {
            (arg * f).cos()
        } else if i < 2 * half {
            (arg * f).sin()
        } else {
            0.0
        }
    });
    let h = nn::linear(&tape.constant(emb), w1, Some(b1))?.silu()?;
    Ok(nn::linear(&h, w2, Some(b2))?)
}

/// `x * (1 + scale) + shift` with per-channel `shift`, `scale` of `[1, D]`.
fn modulate<'t>(x: &Var<'t>, shift: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    Ok(x.channel_scale(&scale.add_scalar(1.0)?)?.bias_add(shift)?)
}

/// One adaLN-Zero block over the joint `[prompt; visual]` sequence. Returns
/// the updated prompt and visual tokens.
pub fn dit_block<'t>(
    prompt: &Var<'t>,
    z: &Var<'t>,
    c: &Var<'t>,
    params: &DiTBlockParams,
    heads: usize,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let d = bound[params.wq].shape()[0];
    let (ps, zs) = (prompt.shape(), z.shape());
    if ps.len() != 2 || zs.len() != 2 || ps[1] != d || zs[1] != d {
        return Err(CoreError::Config(format!(
            "dit block of width {d} got prompt {ps:?}, visual {zs:?}"
        )));
    }
    let tape = z.tape();
    let lp = ps[0];
    let m = nn::linear(c, &bound[params.mod_w], Some(&bound[params.mod_b]))?;
    let chunk = |i: usize| m.narrow(1, i * d, d);
    let x = tape.concat(&[*prompt, *z], 0)?;

    let h = modulate(&x.normalize(LN_EPS)?, &chunk(0)?, &chunk(1)?)?;
    let q = h.matmul(&bound[params.wq])?;
    let k = h.matmul(&bound[params.wk])?;
    let v = h.matmul(&bound[params.wv])?;
    let a = nn::multi_head_attention(&q, &k, &v, heads)?.matmul(&bound[params.wo])?;
    let x = x.add(&a.channel_scale(&chunk(2)?)?)?;

    let h = modulate(&x.normalize(LN_EPS)?, &chunk(3)?, &chunk(4)?)?;
    let f = nn::linear(&h, &bound[params.mlp_w1], Some(&bound[params.mlp_b1]))?.silu()?;
    let f = nn::linear(&f, &bound[params.mlp_w2], Some(&bound[params.mlp_b2]))?;
    let x = x.add(&f.channel_scale(&chunk(5)?)?)?;

    Ok((x.narrow(0, 0, lp)?, x.narrow(0, lp, zs[0])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            width: 24,
            heads: 2,
            blocks: 2,
            p: 2,
            q: 2,
            lora_rank: 2,
            frames: 4,
            height: 4,
            width_px: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_dims() {
        let bad = [
            ModelConfig {
                width: 64,
                ..small()
            },
            ModelConfig {
                heads: 5,
                ..small()
            },
            ModelConfig {
                frames: 3,
                ..small()
            },
            ModelConfig {
                lora_rank: 24,
                ..small()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(CoreError::Config(_))),
                "{cfg:?}"
            );
        }
        assert!(small().validate().is_ok());
    }

    #[test]
    fn positional_origin_is_sin_zero_cos_one() {
        let pe = positional_encoding(TokenGrid { t: 2, h: 2, w: 2 }, 12).unwrap();
        assert_eq!(
            &pe.data()[..12],
            &[0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 1., 1.]
        );
    }

    #[test]
    fn prompt_hash_is_deterministic_and_case_folded() {
        assert_eq!(token_bucket("Walk"), token_bucket("walk"));
        let m = prompt_matrix("a b c d e f g h i");
        // slot 0 holds "a" and "i"
        let row: f64 = m.data()[..PROMPT_VOCAB].iter().sum();
        assert!((row - 1.0).abs() < 1e-15);
        assert_eq!(
            prompt_matrix(""),
            Tensor::zeros(&[PROMPT_SLOTS, PROMPT_VOCAB])
        );
    }

    #[test]
    fn forward_preserves_video_shape() {
        let model = Model::new(small(), 7).unwrap();
        let x = Rng::new(1).normal_tensor(&model.config.video_shape(), 1.0);
        let y = model
            .apply(&x, 0.1, &model.null_conditions(), true)
            .unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }

    #[test]
    fn embed_decode_roundtrip_at_init() {
        let model = Model::new(
            ModelConfig {
                width: 24,
                ..small()
            },
            3,
        )
        .unwrap();
        assert!(model.config.patch_dim() <= model.config.width);
        let tape = Tape::new();
        let b = model.store.bind_frozen(&tape);
        let x = tape.constant(Rng::new(2).normal_tensor(&model.config.video_shape(), 1.0));
        let l = &model.layout;
        let tok = embed_video(&x, &b[l.embed_w], &b[l.embed_b], 2, 2).unwrap();
        let rows = nn::linear(&tok.tokens, &b[l.decode_w], Some(&b[l.decode_b])).unwrap();
        let back = decode_patches(&rows, &model.config).unwrap().value();
        assert!(back.max_abs_diff(&x.value()) < 1e-12);
    }
}
