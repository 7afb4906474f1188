//! Camera poses, Plücker ray maps and the RealEstate10K-style trajectory file.
//!
//! Extrinsics map world points into the camera frame (`x_cam = R x + t`).
//! Trajectory files and [`CameraTrajectory`] carry intrinsics normalized by
//! image width (fx, cx) and height (fy, cy); [`plucker_map`] scales them to
//! pixels for the requested resolution.

use nalgebra::{Matrix3, Vector3};
use tokenmotion_tensor::Tensor;

use crate::error::{CoreError, Result};

const ORTHO_EXACT: f64 = 1e-12;
const ORTHO_REPAIR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(CoreError::Validation(format!(
                "intrinsics need positive finite focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Normalized intrinsics scaled to a `height x width` image.
    pub fn to_pixels(&self, height: usize, width: usize) -> Self {
        Self {
            fx: self.fx * width as f64,
            fy: self.fy * height as f64,
            cx: self.cx * width as f64,
            cy: self.cy * height as f64,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 [u, v, 1]^T`
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `R^T R = I` and `det R = 1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = orthonormality_error(&rotation);
        if dev > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::Validation(format!(
                "rotation is not orthonormal (deviation {dev:.3e}, det {:.6})",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Validation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Accepts rotations within 1e-4 of orthonormal and projects them back
    /// onto SO(3); rejects anything further away.
    pub fn repaired(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let dev = orthonormality_error(&rotation);
        let det = rotation.determinant();
        if dev <= ORTHO_EXACT && (det - 1.0).abs() <= ORTHO_EXACT {
            return Self::new(rotation, translation);
        }
        if dev > ORTHO_REPAIR || det <= 0.0 {
            return Err(CoreError::Validation(format!(
                "rotation deviates from orthonormal by {dev:.3e} (det {det:.6})"
            )));
        }
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        Self::new(u * vt, translation)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub timestamp: u64,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub frames: Vec<CameraFrame>,
}

impl CameraTrajectory {
    pub fn new(frames: Vec<CameraFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(CoreError::Validation(
                "trajectory needs at least one frame".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Ray construction for [`plucker_map`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RayConvention {
    /// `d = R K^-1 [u, v, 1]^T + t`, moment `t x d`, both divided by `|d|`.
    #[default]
    Paper,
    /// `d = R K^-1 [u, v, 1]^T` through origin `t`.
    Classic,
}

impl std::str::FromStr for RayConvention {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "classic" => Ok(Self::Classic),
            _ => Err(CoreError::Config(format!(
                "ray_convention must be paper|classic, got {s}"
            ))),
        }
    }
}

/// Plücker 6-vector `(d, t x d) / |d|` for continuous pixel coordinates `(u, v)`.
/// Intrinsics are in pixels.
pub fn pixel_ray(
    u: f64,
    v: f64,
    intrinsics: &Intrinsics,
    extrinsics: &Extrinsics,
    convention: RayConvention,
) -> Result<[f64; 6]> {
    let r = &extrinsics.rotation;
    let t = &extrinsics.translation;
    let d = match convention {
        RayConvention::Paper => r * intrinsics.unproject(u, v) + t,
        RayConvention::Classic => r * intrinsics.unproject(u, v),
    };
    let norm = d.norm();
    if norm < 1e-12 {
        return Err(CoreError::DegenerateRay { u, v, frame: 0 });
    }
    let m = t.cross(&d);
    Ok([
        d.x / norm,
        d.y / norm,
        d.z / norm,
        m.x / norm,
        m.y / norm,
        m.z / norm,
    ])
}

/// Ray map of shape `6 x T x H x W`, sampled at pixel centers.
pub fn plucker_map(
    trajectory: &CameraTrajectory,
    height: usize,
    width: usize,
    convention: RayConvention,
) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(CoreError::Config("plucker_map needs H, W >= 1".into()));
    }
    let frames = trajectory.len();
    let plane = height * width;
    let mut data = vec![0.0; 6 * frames * plane];
    for (f, frame) in trajectory.frames.iter().enumerate() {
        let k = frame.intrinsics.to_pixels(height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                let ray =
                    pixel_ray(u, v, &k, &frame.extrinsics, convention).map_err(|e| match e {
                        CoreError::DegenerateRay { u, v, .. } => {
                            CoreError::DegenerateRay { u, v, frame: f }
                        }
                        other => other,
                    })?;
                for (c, val) in ray.iter().enumerate() {
                    data[(c * frames + f) * plane + y * width + x] = *val;
                }
            }
        }
    }
    Ok(Tensor::new(vec![6, frames, height, width], data)?)
}

/// Pose of `b` relative to `a`: `(Rb Ra^T, tb - Rb Ra^T ta)`.
pub fn relative_pose(a: &Extrinsics, b: &Extrinsics) -> Extrinsics {
    let rotation = b.rotation * a.rotation.transpose();
    Extrinsics {
        rotation,
        translation: b.translation - rotation * a.translation,
    }
}

/// Composition `second ∘ first` of world-to-camera style transforms.
pub fn compose(first: &Extrinsics, second: &Extrinsics) -> Extrinsics {
    Extrinsics {
        rotation: second.rotation * first.rotation,
        translation: second.rotation * first.translation + second.translation,
    }
}

pub fn rotation_about(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Parses a trajectory file: a video-id line followed by one
/// 19-field line per frame.
pub fn parse_trajectory_file(text: &str) -> Result<(String, CameraTrajectory)> {
    let mut lines = text.lines().enumerate();
    let video_id = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim().to_string(),
            None => {
                return Err(CoreError::Parse {
                    line: 1,
                    msg: "missing video identifier".into(),
                })
            }
        }
    };
    let mut frames = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 19 {
            return Err(CoreError::Parse {
                line: line_no,
                msg: format!("expected 19 fields, found {}", fields.len()),
            });
        }
        let timestamp = fields[0].parse::<u64>().map_err(|e| CoreError::Parse {
            line: line_no,
            msg: format!("bad timestamp {:?}: {e}", fields[0]),
        })?;
        let nums = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CoreError::Parse {
                        line: line_no,
                        msg: format!("bad number {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let intrinsics =
            Intrinsics::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| CoreError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let p = &nums[6..18];
        let rotation = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
        let translation = Vector3::new(p[3], p[7], p[11]);
        let extrinsics = Extrinsics::repaired(rotation, translation)
            .map_err(|e| CoreError::Validation(format!("line {line_no}: {e}")))?;
        frames.push(CameraFrame {
            timestamp,
            intrinsics,
            extrinsics,
        });
    }
    Ok((video_id, CameraTrajectory::new(frames)?))
}

/// Canonical text form: single spaces, shortest round-tripping floats.
pub fn serialize_trajectory(video_id: &str, trajectory: &CameraTrajectory) -> String {
    let mut out = String::new();
    out.push_str(video_id);
    out.push('\n');
    for f in &trajectory.frames {
        let k = &f.intrinsics;
        let r = &f.extrinsics.rotation;
        let t = &f.extrinsics.translation;
        let mut fields = vec![f.timestamp.to_string()];
        fields.extend(
            [k.fx, k.fy, k.cx, k.cy, 0.0, 0.0]
                .iter()
                .map(|v| v.to_string()),
        );
        for row in 0..3 {
            for col in 0..3 {
                fields.push(r[(row, col)].to_string());
            }
            fields.push(t[row].to_string());
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}
