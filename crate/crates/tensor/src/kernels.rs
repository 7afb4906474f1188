//! Loop kernels shared by forward and backward passes. All reductions run in a
//! fixed sequential order so results are bit-reproducible.

use crate::error::{Result, TensorError};

/// `a[m, k] @ b[k, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m, n] @ b[k, n]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m, k]^T @ c[m, n]`
pub fn matmul_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let cr = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, cv) in out[p * n..(p + 1) * n].iter_mut().zip(cr) {
                *o += av * cv;
            }
        }
    }
    out
}

/// Transpose of a row-major `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Per-channel sums of a channel-first gradient.
pub fn channel_sums(g: &[f64], channels: usize) -> Vec<f64> {
    let per = g.len() / channels;
    g.chunks_exact(per).map(|c| c.iter().sum()).collect()
}

/// Geometry of a per-frame 2-D convolution over `x[C, T, H, W]`.
pub struct Conv2dGeom {
    pub in_c: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[0] || w[2] != w[3] {
            return Err(TensorError::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        let k = w[2];
        let (h, wd) = (x[2], x[3]);
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Self {
            in_c: x[0],
            frames: x[1],
            h,
            w: wd,
            out_c: w[0],
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.frames, self.oh, self.ow]
    }

    /// Visits every (output index, input index, weight index) triple in a fixed order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (c_in, t_n, h, w, k) = (self.in_c, self.frames, self.h, self.w, self.k);
        for o in 0..self.out_c {
            for t in 0..t_n {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let out_i = ((o * t_n + t) * self.oh + oy) * self.ow + ox;
                        for c in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let in_i = ((c * t_n + t) * h + iy as usize) * w + ix as usize;
                                    let w_i = ((o * c_in + c) * k + ky) * k + kx;
                                    f(out_i, in_i, w_i);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let per = self.frames * self.oh * self.ow;
        let mut out = vec![0.0; self.out_c * per];
        if let Some(b) = b {
            for (o, chunk) in out.chunks_exact_mut(per).enumerate() {
                chunk.fill(b[o]);
            }
        }
        self.for_each_tap(|oi, ii, wi| out[oi] += w[wi] * x[ii]);
        out
    }

    pub fn backward_input(&self, g: &[f64], w: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_c * self.frames * self.h * self.w];
        self.for_each_tap(|oi, ii, wi| gx[ii] += w[wi] * g[oi]);
        gx
    }

    pub fn backward_weight(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gw = vec![0.0; self.out_c * self.in_c * self.k * self.k];
        self.for_each_tap(|oi, ii, wi| gw[wi] += x[ii] * g[oi]);
        gw
    }
}

/// Geometry of a temporal causal convolution over `x[C, T, H, W]`.
pub struct CausalConv3dGeom {
    pub in_c: usize,
    pub frames: usize,
    pub plane: usize,
    pub out_c: usize,
    pub kt: usize,
    pub stride: usize,
    pub out_frames: usize,
    out_hw: (usize, usize),
}

impl CausalConv3dGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 5 || w[1] != x[0] || w[3] != 1 || w[4] != 1 {
            return Err(TensorError::shape("causal_conv3d", x, w));
        }
        if w[2] == 0 {
            return Err(TensorError::Config("causal_conv3d needs kt >= 1".into()));
        }
        if stride == 0 || x[1] % stride != 0 {
            return Err(TensorError::Config(format!(
                "causal_conv3d: T={} not divisible by temporal stride {stride}",
                x[1]
            )));
        }
        Ok(Self {
            in_c: x[0],
            frames: x[1],
            plane: x[2] * x[3],
            out_c: w[0],
            kt: w[2],
            stride,
            out_frames: x[1] / stride,
            out_hw: (x[2], x[3]),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.out_frames, self.out_hw.0, self.out_hw.1]
    }

    /// Source frame read by output step `tau` at kernel tap `j`. The window
    /// ends on the last frame of step `tau`'s own stride block, so every frame
    /// is read and none from a later block; reads before frame 0 replicate it.
    fn source_frame(&self, tau: usize, j: usize) -> usize {
        (tau * self.stride + self.stride + j).saturating_sub(self.kt)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.plane;
        for o in 0..self.out_c {
            for tau in 0..self.out_frames {
                let out_base = (o * self.out_frames + tau) * plane;
                for c in 0..self.in_c {
                    for j in 0..self.kt {
                        let src = self.source_frame(tau, j);
                        let in_base = (c * self.frames + src) * plane;
                        let wi = (o * self.in_c + c) * self.kt + j;
                        for s in 0..plane {
                            f(out_base + s, in_base + s, wi);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let per = self.out_frames * self.plane;
        let mut out = vec![0.0; self.out_c * per];
        if let Some(b) = b {
            for (o, chunk) in out.chunks_exact_mut(per).enumerate() {
                chunk.fill(b[o]);
            }
        }
        self.for_each_tap(|oi, ii, wi| out[oi] += w[wi] * x[ii]);
        out
    }

    pub fn backward_input(&self, g: &[f64], w: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_c * self.frames * self.plane];
        self.for_each_tap(|oi, ii, wi| gx[ii] += w[wi] * g[oi]);
        gx
    }

    pub fn backward_weight(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gw = vec![0.0; self.out_c * self.in_c * self.kt];
        self.for_each_tap(|oi, ii, wi| gw[wi] += x[ii] * g[oi]);
        gw
    }
}
