//! Motion patchification: compress a `C x T x H x W` raster into tokens on
//! the same `(T/q, H/p, W/p)` grid as the visual tokens.

use tokenmotion_tensor::{nn, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::params::{Bound, Init, ParamId};

/// Token grid `(T', H', W')`; tokens are flattened time-major, then row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    /// Grid for a `T x H x W` raster, validating `p | H`, `p | W`, `q | T`.
    pub fn for_raster(t: usize, h: usize, w: usize, p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(CoreError::Config(format!(
                "patch sizes must be positive, got p={p}, q={q}"
            )));
        }
        for (name, dim, by) in [("H", h, p), ("W", w, p), ("T", t, q)] {
            if dim == 0 || dim % by != 0 {
                return Err(CoreError::Config(format!(
                    "{name}={dim} is not a positive multiple of {by}"
                )));
            }
        }
        Ok(Self {
            t: t / q,
            h: h / p,
            w: w / p,
        })
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

/// Token sequence `L x D` with its grid.
#[derive(Clone, Copy, Debug)]
pub struct MotionTokens<'t> {
    pub tokens: Var<'t>,
    pub grid: TokenGrid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    #[default]
    Patchify,
    ControlNet,
}

impl std::str::FromStr for EncoderKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchify" => Ok(Self::Patchify),
            "controlnet" => Ok(Self::ControlNet),
            _ => Err(CoreError::Config(format!(
                "encoder must be patchify or controlnet, got {s:?}"
            ))),
        }
    }
}

/// Shape of one encoder: raster channels, width and patch sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub channels: usize,
    pub width: usize,
    pub p: usize,
    pub q: usize,
}

impl EncoderShape {
    pub fn patch_dim(&self) -> usize {
        self.channels * self.p * self.p * self.q
    }
}

#[derive(Clone, Debug)]
pub struct PatchifyParams {
    pub shape: EncoderShape,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub temporal_w: ParamId,
    pub temporal_b: ParamId,
}

impl PatchifyParams {
    pub fn init(init: &mut Init<'_>, shape: EncoderShape) -> Self {
        let EncoderShape {
            channels: c,
            width: d,
            p,
            q,
        } = shape;
        Self {
            shape,
            spatial_w: init.kernel("spatial_w", &[d, c, p, p]),
            spatial_b: init.zeros("spatial_b", &[d]),
            temporal_w: init.kernel("temporal_w", &[d, d, q + 1, 1, 1]),
            temporal_b: init.zeros("temporal_b", &[d]),
        }
    }

    pub fn count(shape: EncoderShape) -> usize {
        let EncoderShape {
            channels: c,
            width: d,
            p,
            q,
        } = shape;
        d * c * p * p + d + d * d * (q + 1) + d
    }
}

fn check_raster(x: &Var<'_>, shape: EncoderShape) -> Result<TokenGrid> {
    let s = x.shape();
    if s.len() != 4 || s[0] != shape.channels {
        return Err(CoreError::Config(format!(
            "motion raster must be {} x T x H x W, got {s:?}",
            shape.channels
        )));
    }
    TokenGrid::for_raster(s[1], s[2], s[3], shape.p, shape.q)
}

/// Per-frame strided conv to width D, SiLU, then causal temporal conv with
/// kernel `q + 1` and stride `q`, flattened to `L x D`.
pub fn patchify_motion<'t>(
    x: &Var<'t>,
    params: &PatchifyParams,
    bound: &Bound<'t>,
) -> Result<MotionTokens<'t>> {
    let grid = check_raster(x, params.shape)?;
    let s = params.shape;
    let y = x
        .conv2d(
            &bound[params.spatial_w],
            Some(&bound[params.spatial_b]),
            s.p,
            0,
        )?
        .silu()?
        .causal_conv3d(
            &bound[params.temporal_w],
            Some(&bound[params.temporal_b]),
            s.q,
        )?;
    let tokens = y.reshape(&[s.width, grid.len()])?.t()?;
    Ok(MotionTokens { tokens, grid })
}

/// Gather index turning `C x T x H x W` into `L x (C*q*p*p)` patch rows,
/// tokens in grid order.
pub fn patch_index(c: usize, t: usize, h: usize, w: usize, p: usize, q: usize) -> Vec<usize> {
    let (gt, gh, gw) = (t / q, h / p, w / p);
    let mut idx = Vec::with_capacity(c * t * h * w);
    for tt in 0..gt {
        for hh in 0..gh {
            for ww in 0..gw {
                for ch in 0..c {
                    for dt in 0..q {
                        for dy in 0..p {
                            for dx in 0..p {
                                let (ft, y, x) = (tt * q + dt, hh * p + dy, ww * p + dx);
                                idx.push(((ch * t + ft) * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse layout of [`patch_index`]: the raster position each patch-row
/// entry came from, used to scatter decoded patches back.
pub fn unpatch_index(c: usize, t: usize, h: usize, w: usize, p: usize, q: usize) -> Vec<usize> {
    let fwd = patch_index(c, t, h, w, p, q);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

pub fn patches<'t>(x: &Var<'t>, p: usize, q: usize) -> Result<(Var<'t>, TokenGrid)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::Config(format!(
            "expected C x T x H x W, got {s:?}"
        )));
    }
    let grid = TokenGrid::for_raster(s[1], s[2], s[3], p, q)?;
    let idx = patch_index(s[0], s[1], s[2], s[3], p, q);
    let rows = x.gather(idx, &[grid.len(), s[0] * q * p * p])?;
    Ok((rows, grid))
}

/// Ablation encoder in the spirit of ControlNet: a full patch embedding
/// followed by a residual MLP and an output projection, with no learned
/// spatio-temporal compression.
#[derive(Clone, Debug)]
pub struct ControlNetParams {
    pub shape: EncoderShape,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub back_w: ParamId,
    pub back_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ControlNetParams {
    pub fn init(init: &mut Init<'_>, shape: EncoderShape) -> Self {
        let (pd, d) = (shape.patch_dim(), shape.width);
        Self {
            shape,
            embed_w: init.linear("embed_w", pd, d),
            embed_b: init.zeros("embed_b", &[d]),
            hidden_w: init.linear("hidden_w", d, 4 * d),
            hidden_b: init.zeros("hidden_b", &[4 * d]),
            back_w: init.linear("back_w", 4 * d, d),
            back_b: init.zeros("back_b", &[d]),
            out_w: init.linear("out_w", d, d),
            out_b: init.zeros("out_b", &[d]),
        }
    }

    pub fn count(shape: EncoderShape) -> usize {
        let (pd, d) = (shape.patch_dim(), shape.width);
        pd * d + d + 8 * d * d + 4 * d + d + d * d + d
    }
}

pub fn controlnet_style_encode<'t>(
    x: &Var<'t>,
    params: &ControlNetParams,
    bound: &Bound<'t>,
) -> Result<MotionTokens<'t>> {
    check_raster(x, params.shape)?;
    let (rows, grid) = patches(x, params.shape.p, params.shape.q)?;
    let h = nn::linear(&rows, &bound[params.embed_w], Some(&bound[params.embed_b]))?;
    let m = nn::linear(&h, &bound[params.hidden_w], Some(&bound[params.hidden_b]))?.silu()?;
    let m = nn::linear(&m, &bound[params.back_w], Some(&bound[params.back_b]))?;
    let tokens = nn::linear(
        &h.add(&m)?,
        &bound[params.out_w],
        Some(&bound[params.out_b]),
    )?;
    Ok(MotionTokens { tokens, grid })
}

#[derive(Clone, Debug)]
pub enum MotionEncoder {
    Patchify(PatchifyParams),
    ControlNet(ControlNetParams),
}

impl MotionEncoder {
    pub fn init(init: &mut Init<'_>, kind: EncoderKind, shape: EncoderShape) -> Self {
        match kind {
            EncoderKind::Patchify => Self::Patchify(PatchifyParams::init(init, shape)),
            EncoderKind::ControlNet => Self::ControlNet(ControlNetParams::init(init, shape)),
        }
    }

    pub fn encode<'t>(&self, x: &Var<'t>, bound: &Bound<'t>) -> Result<MotionTokens<'t>> {
        match self {
            Self::Patchify(p) => patchify_motion(x, p, bound),
            Self::ControlNet(c) => controlnet_style_encode(x, c, bound),
        }
    }
}

/// Convenience for tests and tools: encode a raster with constant parameters.
pub fn encode_constant(
    encoder: &MotionEncoder,
    store: &crate::params::ParamStore,
    x: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    Ok(encoder.encode(&xv, &bound)?.tokens.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamStore, Role};
    use tokenmotion_tensor::Rng;

    fn shape() -> EncoderShape {
        EncoderShape {
            channels: 6,
            width: 12,
            p: 4,
            q: 2,
        }
    }

    #[test]
    fn token_count_matches_grid() {
        let mut store = ParamStore::new();
        let enc = MotionEncoder::init(
            &mut Init::new(&mut store, 1, Role::Encoder, "cam."),
            EncoderKind::Patchify,
            shape(),
        );
        let x = Rng::new(2).normal_tensor(&[6, 8, 32, 32], 1.0);
        let tok = encode_constant(&enc, &store, &x).unwrap();
        assert_eq!(tok.shape(), &[256, 12]);
        assert_eq!(store.count(), PatchifyParams::count(shape()));
    }

    #[test]
    fn divisibility_errors_name_the_dimension() {
        let err = TokenGrid::for_raster(8, 30, 32, 4, 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("H=30"), "{err}");
        let err = TokenGrid::for_raster(7, 32, 32, 4, 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("T=7"), "{err}");
    }

    #[test]
    fn zero_raster_gives_zero_tokens() {
        for kind in [EncoderKind::Patchify, EncoderKind::ControlNet] {
            let mut store = ParamStore::new();
            let enc = MotionEncoder::init(
                &mut Init::new(&mut store, 3, Role::Encoder, ""),
                kind,
                shape(),
            );
            let tok = encode_constant(&enc, &store, &Tensor::zeros(&[6, 4, 8, 8])).unwrap();
            assert_eq!(tok.shape(), &[8, 12]);
            assert_eq!(tok.max_abs(), 0.0);
        }
    }

    #[test]
    fn patch_rows_follow_token_order() {
        let x = Tensor::from_fn(&[2, 2, 4, 4], |i| i as f64);
        let tape = Tape::new();
        let (rows, grid) = patches(&tape.constant(x), 2, 2).unwrap();
        assert_eq!(grid.dims(), (1, 2, 2));
        let r = rows.value();
        assert_eq!(r.shape(), &[4, 16]);
        // token (0, 0, 1): channel 0, frame 0, rows 0..2, cols 2..4
        assert_eq!(&r.data()[16..20], &[2.0, 3.0, 6.0, 7.0]);
        let inv = unpatch_index(2, 2, 4, 4, 2, 2);
        let back: Vec<f64> = inv.iter().map(|&i| r.data()[i]).collect();
        assert_eq!(back, (0..64).map(|i| i as f64).collect::<Vec<_>>());
    }
}
