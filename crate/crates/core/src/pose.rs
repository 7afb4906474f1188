//! Human skeletons, pose-raster rendering and the human-region prior mask.
//!
//! Skeletons use the COCO-17 joint order. Rendering follows the OpenPose
//! 18-point drawing convention, with the neck synthesized as the shoulder
//! midpoint when both shoulders are detected.

use std::fmt::Write as _;

use tokenmotion_tensor::{Rng, Tensor};

use crate::error::{CoreError, Result};

pub const NUM_JOINTS: usize = 17;
pub const DETECTION_THRESHOLD: f64 = 0.3;
pub const DEFAULT_DILATE_RADIUS: usize = 2;

/// COCO-17 index of each OpenPose-18 point; `None` is the synthesized neck.
const OPENPOSE_FROM_COCO: [Option<usize>; 18] = [
    Some(0),
    None,
    Some(6),
    Some(8),
    Some(10),
    Some(5),
    Some(7),
    Some(9),
    Some(12),
    Some(14),
    Some(16),
    Some(11),
    Some(13),
    Some(15),
    Some(2),
    Some(1),
    Some(4),
    Some(3),
];

/// OpenPose limb list over the 18-point layout.
const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub fn detected(&self) -> bool {
        self.confidence >= DETECTION_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub person_id: u32,
    pub joints: [Joint; NUM_JOINTS],
}

impl Skeleton {
    pub fn new(person_id: u32, joints: [Joint; NUM_JOINTS]) -> Result<Self> {
        if let Some(j) = joints
            .iter()
            .find(|j| !(0.0..=1.0).contains(&j.confidence) || !j.x.is_finite() || !j.y.is_finite())
        {
            return Err(CoreError::Validation(format!(
                "joint confidence must lie in [0, 1] with finite coordinates, got {j:?}"
            )));
        }
        Ok(Self { person_id, joints })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut s = self.clone();
        for j in &mut s.joints {
            j.x += dx;
            j.y += dy;
        }
        s
    }

    /// Points in the OpenPose-18 layout with their detection flag.
    fn openpose_points(&self) -> [(f64, f64, bool); 18] {
        let mut out = [(0.0, 0.0, false); 18];
        for (o, src) in OPENPOSE_FROM_COCO.iter().enumerate() {
            out[o] = match src {
                Some(c) => {
                    let j = &self.joints[*c];
                    (j.x, j.y, j.detected())
                }
                None => {
                    let (l, r) = (&self.joints[5], &self.joints[6]);
                    (
                        (l.x + r.x) / 2.0,
                        (l.y + r.y) / 2.0,
                        l.detected() && r.detected(),
                    )
                }
            };
        }
        out
    }
}

/// Skeletons visible in each frame.
pub type SkeletonSequence = Vec<Vec<Skeleton>>;

pub fn limb_width(height: usize) -> usize {
    ((height as f64 / 64.0).round() as usize).max(1)
}

struct Canvas<'a> {
    data: &'a mut [f64],
    frames: usize,
    frame: usize,
    h: usize,
    w: usize,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let plane = self.h * self.w;
        for (c, v) in color.iter().enumerate() {
            self.data[(c * self.frames + self.frame) * plane + y as usize * self.w + x as usize] =
                *v as f64 / 255.0;
        }
    }

    fn square(&mut self, x: i64, y: i64, width: usize, color: [u8; 3]) {
        let lo = -((width as i64 - 1) / 2);
        let hi = width as i64 / 2;
        for dy in lo..=hi {
            for dx in lo..=hi {
                self.put(x + dx, y + dy, color);
            }
        }
    }

    fn disc(&mut self, x: i64, y: i64, radius: usize, color: [u8; 3]) {
        let r = radius as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(x + dx, y + dy, color);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), width: usize, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.square(x, y, width, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn pixel(v: f64) -> i64 {
    v.round() as i64
}

/// Renders skeleton frames into a `3 x T x H x W` raster in `[0, 1]`.
/// Later persons paint over earlier ones.
pub fn rasterize(frames: &[Vec<Skeleton>], height: usize, width: usize) -> Tensor {
    let t = frames.len().max(1);
    let mut data = vec![0.0; 3 * t * height * width];
    let width_px = limb_width(height);
    for (f, people) in frames.iter().enumerate() {
        let mut canvas = Canvas {
            data: &mut data,
            frames: t,
            frame: f,
            h: height,
            w: width,
        };
        for person in people {
            let pts = person.openpose_points();
            for (i, &(a, b)) in LIMBS.iter().enumerate() {
                let (pa, pb) = (pts[a], pts[b]);
                if pa.2 && pb.2 {
                    canvas.line(
                        (pixel(pa.0), pixel(pa.1)),
                        (pixel(pb.0), pixel(pb.1)),
                        width_px,
                        COLORS[i],
                    );
                }
            }
            for (i, p) in pts.iter().enumerate() {
                if p.2 {
                    canvas.disc(pixel(p.0), pixel(p.1), width_px + 1, COLORS[i]);
                }
            }
        }
    }
    Tensor::new(vec![3, t, height, width], data).expect("raster shape")
}

/// Source interval along one axis for target cell `i`: exact nearest
/// neighbour when upsampling, the full covered block when downsampling.
fn source_span(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = i * src / dst;
    let end = ((i + 1) * src / dst).max(start + 1).min(src);
    (start, end)
}

/// Binary human-region mask on a `(T', H', W')` token grid.
///
/// Channel max, resize (nearest frame in time; any-nonzero over each covered
/// pixel block in space), binarize, then square dilation of `radius` cells
/// within each frame. Returned shape is `1 x T' x H' x W'`.
pub fn prior_mask(raster: &Tensor, grid: (usize, usize, usize), radius: usize) -> Result<Tensor> {
    let s = raster.shape();
    if s.len() != 4 {
        return Err(CoreError::Config(format!(
            "pose raster must be C x T x H x W, got {s:?}"
        )));
    }
    let (gt, gh, gw) = grid;
    if gt == 0 || gh == 0 || gw == 0 {
        return Err(CoreError::Config(format!(
            "prior grid must be positive, got {grid:?}"
        )));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let on = |f: usize, y: usize, x: usize| -> bool {
        (0..c).any(|ch| raster.data()[(ch * t + f) * plane + y * w + x] > 0.0)
    };
    let mut resized = vec![false; gt * gh * gw];
    for tt in 0..gt {
        let f = tt * t / gt;
        for yy in 0..gh {
            let (y0, y1) = source_span(yy, h, gh);
            for xx in 0..gw {
                let (x0, x1) = source_span(xx, w, gw);
                resized[(tt * gh + yy) * gw + xx] = (y0..y1).any(|y| (x0..x1).any(|x| on(f, y, x)));
            }
        }
    }
    let r = radius as i64;
    let mut out = vec![0.0; gt * gh * gw];
    for tt in 0..gt {
        for yy in 0..gh as i64 {
            for xx in 0..gw as i64 {
                let hit = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (y, x) = (yy + dy, xx + dx);
                        y >= 0
                            && x >= 0
                            && y < gh as i64
                            && x < gw as i64
                            && resized[(tt * gh + y as usize) * gw + x as usize]
                    })
                });
                if hit {
                    out[(tt * gh + yy as usize) * gw + xx as usize] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::new(vec![1, gt, gh, gw], out)?)
}

/// Hip-center path of the synthetic walker, in pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathSpec {
    Line {
        start: (f64, f64),
        velocity: (f64, f64),
    },
    Arc {
        center: (f64, f64),
        radius: f64,
        angular_velocity: f64,
        phase: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSpec {
    pub path: PathSpec,
    /// Peak limb swing in radians.
    pub gait_amplitude: f64,
    /// Gait cycles per frame.
    pub gait_frequency: f64,
    /// Standing height in pixels.
    pub body_height: f64,
}

impl MotionSpec {
    pub fn hip_at(&self, t: f64) -> (f64, f64) {
        match self.path {
            PathSpec::Line { start, velocity } => {
                (start.0 + velocity.0 * t, start.1 + velocity.1 * t)
            }
            PathSpec::Arc {
                center,
                radius,
                angular_velocity,
                phase,
            } => {
                let a = phase + angular_velocity * t;
                (center.0 + radius * a.cos(), center.1 + radius * a.sin())
            }
        }
    }
}

/// Deterministic articulated walker. The seed picks the gait phase and small
/// variations in limb proportions.
pub fn synth_skeleton_sequence(seed: u64, frames: usize, spec: &MotionSpec) -> Vec<Skeleton> {
    let mut rng = Rng::stream(seed, "walker");
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let h = spec.body_height;
    let prop = |rng: &mut Rng, base: f64| base * h * rng.uniform_range(0.95, 1.05);
    let thigh = prop(&mut rng, 0.25);
    let shin = prop(&mut rng, 0.23);
    let upper_arm = prop(&mut rng, 0.17);
    let forearm = prop(&mut rng, 0.15);
    let torso = prop(&mut rng, 0.30);
    let neck = 0.08 * h;
    let facing = match spec.path {
        PathSpec::Line { velocity, .. } if velocity.0 < 0.0 => -1.0,
        _ => 1.0,
    };
    (0..frames)
        .map(|f| {
            let (px, py) = spec.hip_at(f as f64);
            let swing = spec.gait_amplitude
                * (std::f64::consts::TAU * spec.gait_frequency * f as f64 + phase).sin();
            let limb = |x: f64, y: f64, len: f64, angle: f64| {
                (x + facing * len * angle.sin(), y + len * angle.cos())
            };
            let hip_off = 0.04 * h;
            let sho_off = 0.07 * h;
            let (lhx, lhy) = (px - hip_off, py);
            let (rhx, rhy) = (px + hip_off, py);
            let (lsx, lsy) = (px - sho_off, py - torso);
            let (rsx, rsy) = (px + sho_off, py - torso);
            let bend = 0.5 * spec.gait_amplitude;
            let (lkx, lky) = limb(lhx, lhy, thigh, swing);
            let (rkx, rky) = limb(rhx, rhy, thigh, -swing);
            let (lax, lay) = limb(lkx, lky, shin, swing - bend * (1.0 + swing.signum()) * 0.5);
            let (rax, ray) = limb(rkx, rky, shin, -swing - bend * (1.0 - swing.signum()) * 0.5);
            let (lex, ley) = limb(lsx, lsy, upper_arm, -swing);
            let (rex, rey) = limb(rsx, rsy, upper_arm, swing);
            let (lwx, lwy) = limb(lex, ley, forearm, -swing + 0.3 * spec.gait_amplitude);
            let (rwx, rwy) = limb(rex, rey, forearm, swing + 0.3 * spec.gait_amplitude);
            let (nx, ny) = (px + facing * 0.02 * h, py - torso - neck);
            let e = 0.025 * h;
            let pts = [
                (nx, ny),
                (nx - e, ny - e),
                (nx + e, ny - e),
                (nx - 2.0 * e, ny - 0.5 * e),
                (nx + 2.0 * e, ny - 0.5 * e),
                (lsx, lsy),
                (rsx, rsy),
                (lex, ley),
                (rex, rey),
                (lwx, lwy),
                (rwx, rwy),
                (lhx, lhy),
                (rhx, rhy),
                (lkx, lky),
                (rkx, rky),
                (lax, lay),
                (rax, ray),
            ];
            let joints = pts.map(|(x, y)| Joint {
                x,
                y,
                confidence: 1.0,
            });
            Skeleton {
                person_id: 0,
                joints,
            }
        })
        .collect()
}

/// One line per person per frame: `frame person_id` then 17 `x y conf`
/// triples. A leading `# frames T` comment records the clip length so that
/// frames without people survive a round trip.
pub fn serialize_skeletons(frames: &[Vec<Skeleton>]) -> String {
    let mut out = format!("# frames {}\n", frames.len());
    for (f, people) in frames.iter().enumerate() {
        for p in people {
            let _ = write!(out, "{f} {}", p.person_id);
            for j in &p.joints {
                let _ = write!(out, " {} {} {}", j.x, j.y, j.confidence);
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_skeletons(text: &str) -> Result<SkeletonSequence> {
    let mut declared: Option<usize> = None;
    let mut rows: Vec<(usize, Skeleton)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            if it.next() == Some("frames") {
                declared = Some(it.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
                    CoreError::Parse {
                        line: line_no,
                        msg: "bad frames header".into(),
                    }
                })?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + 3 * NUM_JOINTS {
            return Err(CoreError::Parse {
                line: line_no,
                msg: format!(
                    "expected {} fields, found {}",
                    2 + 3 * NUM_JOINTS,
                    fields.len()
                ),
            });
        }
        let bad = |f: &str| CoreError::Parse {
            line: line_no,
            msg: format!("bad field {f:?}"),
        };
        let frame: usize = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let person_id: u32 = fields[1].parse().map_err(|_| bad(fields[1]))?;
        let mut joints = [Joint {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
        }; NUM_JOINTS];
        for (k, j) in joints.iter_mut().enumerate() {
            let get = |o: usize| -> Result<f64> {
                let f = fields[2 + 3 * k + o];
                f.parse::<f64>().map_err(|_| bad(f))
            };
            *j = Joint {
                x: get(0)?,
                y: get(1)?,
                confidence: get(2)?,
            };
        }
        let sk = Skeleton::new(person_id, joints).map_err(|e| CoreError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        rows.push((frame, sk));
    }
    let frames = rows
        .iter()
        .map(|(f, _)| f + 1)
        .max()
        .unwrap_or(0)
        .max(declared.unwrap_or(0));
    let mut out = vec![Vec::new(); frames];
    for (f, sk) in rows {
        out[f].push(sk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_joint(x: f64, y: f64) -> Skeleton {
        let mut joints = [Joint {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
        }; NUM_JOINTS];
        joints[0] = Joint {
            x,
            y,
            confidence: 1.0,
        };
        Skeleton::new(0, joints).unwrap()
    }

    fn nonzero(raster: &Tensor) -> usize {
        let s = raster.shape();
        let plane = s[1] * s[2] * s[3];
        (0..plane)
            .filter(|&i| (0..3).any(|c| raster.data()[c * plane + i] > 0.0))
            .count()
    }

    #[test]
    fn empty_input_is_black() {
        let r = rasterize(&[vec![], vec![]], 8, 8);
        assert_eq!(r.shape(), &[3, 2, 8, 8]);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_joint_draws_centered_disc() {
        let (h, w) = (32, 32);
        let r = rasterize(&[vec![lone_joint(16.0, 16.0)]], h, w);
        let radius = (limb_width(h) + 1) as i64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let inside = (x - 16).pow(2) + (y - 16).pow(2) <= radius * radius;
                let lit = (0..3).any(|c| r.data()[c * h * w + y as usize * w + x as usize] > 0.0);
                assert_eq!(inside, lit, "({x}, {y})");
            }
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let spec = MotionSpec {
            path: PathSpec::Line {
                start: (10.0, 20.0),
                velocity: (1.0, 0.0),
            },
            gait_amplitude: 0.5,
            gait_frequency: 0.1,
            body_height: 20.0,
        };
        let seq: Vec<Vec<Skeleton>> = synth_skeleton_sequence(1, 3, &spec)
            .into_iter()
            .map(|s| vec![s])
            .collect();
        let r = rasterize(&seq, 32, 32);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(nonzero(&r) > 0);
    }

    #[test]
    fn prior_of_blank_raster_is_blank() {
        let r = Tensor::zeros(&[3, 4, 16, 16]);
        let m = prior_mask(&r, (2, 4, 4), 2).unwrap();
        assert_eq!(m.shape(), &[1, 2, 4, 4]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_dilates_to_block() {
        let mut r = Tensor::zeros(&[3, 2, 8, 8]);
        r.data_mut()[64 + 3 * 8 + 4] = 0.2; // channel 0, frame 1, y=3, x=4
        let m = prior_mask(&r, (2, 8, 8), 1).unwrap();
        let ones: Vec<usize> = (0..128).filter(|&i| m.data()[i] == 1.0).collect();
        let want: Vec<usize> = (2..=4)
            .flat_map(|y| (3..=5).map(move |x| 64 + y * 8 + x))
            .collect();
        assert_eq!(ones, want);
    }

    #[test]
    fn downsampling_keeps_thin_strokes() {
        let mut r = Tensor::zeros(&[1, 1, 16, 16]);
        r.data_mut()[5 * 16 + 9] = 1.0;
        let m = prior_mask(&r, (1, 4, 4), 0).unwrap();
        let ones: Vec<usize> = (0..16).filter(|&i| m.data()[i] == 1.0).collect();
        assert_eq!(ones, vec![4 + 2]);
    }

    #[test]
    fn skeleton_text_roundtrip_keeps_empty_frames() {
        let frames = vec![vec![], vec![lone_joint(1.5, -2.25)], vec![]];
        let text = serialize_skeletons(&frames);
        assert_eq!(parse_skeletons(&text).unwrap(), frames);
        assert_eq!(parse_skeletons("# frames 4\n").unwrap().len(), 4);
        assert!(matches!(
            parse_skeletons("0 0 1 2\n"),
            Err(CoreError::Parse { line: 1, .. })
        ));
    }
}
