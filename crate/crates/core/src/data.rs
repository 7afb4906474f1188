//! Synthetic paired clips (video, camera trajectory, skeletons) and the
//! on-disk dataset layout.
//!
//! A clip renders a procedural wall at world depth `WALL_Z` seen through a
//! moving camera, with a walking figure's pose raster composited on top.
//! Camera-only clips carry blank skeletons, like real footage without people.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use tokenmotion_tensor::{Rng, Tensor};

use crate::backbone::Conditions;
use crate::camera::{
    parse_trajectory_file, plucker_map, rotation_about, serialize_trajectory, CameraFrame,
    CameraTrajectory, Extrinsics, Intrinsics, RayConvention,
};
use crate::error::{CoreError, Result};
use crate::pose::{
    parse_skeletons, rasterize, serialize_skeletons, synth_skeleton_sequence, MotionSpec, PathSpec,
    SkeletonSequence,
};

pub const WALL_Z: f64 = 6.0;
pub const HUMAN_PROMPT: &str = "a person walking in a room";
pub const SCENE_PROMPT: &str = "an empty room";
const INDEX_FILE: &str = "index.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraMotion {
    Truck,
    Dolly,
    Pedestal,
    PanTruck,
}

impl CameraMotion {
    pub const ALL: [CameraMotion; 4] = [Self::Truck, Self::Dolly, Self::Pedestal, Self::PanTruck];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub prompt: String,
    /// `3 x T x H x W` in `[-1, 1]`.
    pub video: Tensor,
    pub trajectory: CameraTrajectory,
    pub skeletons: SkeletonSequence,
}

impl Clip {
    pub fn has_people(&self) -> bool {
        self.skeletons.iter().any(|f| !f.is_empty())
    }

    pub fn conditions(&self, convention: RayConvention) -> Result<Conditions> {
        let s = self.video.shape();
        let (t, h, w) = (s[1], s[2], s[3]);
        Ok(Conditions {
            prompt: self.prompt.clone(),
            camera: plucker_map(&self.trajectory, h, w, convention)?,
            pose: pose_raster(&self.skeletons, t, h, w),
        })
    }
}

/// Pose raster for `frames` frames; a blank sequence gives an all-zero raster.
pub fn pose_raster(skeletons: &SkeletonSequence, frames: usize, h: usize, w: usize) -> Tensor {
    let mut seq = skeletons.clone();
    seq.resize(frames, Vec::new());
    rasterize(&seq, h, w)
}

/// World-to-camera trajectory for one motion type. Speeds vary with the seed;
/// the camera starts at the origin looking down +z.
pub fn synth_trajectory(
    motion: CameraMotion,
    frames: usize,
    rng: &mut Rng,
) -> Result<CameraTrajectory> {
    let speed = rng.uniform_range(0.08, 0.14);
    let yaw_rate = rng.uniform_range(0.04, 0.07);
    let intrinsics = Intrinsics::new(1.0, 1.0, 0.5, 0.5)?;
    let frames = (0..frames)
        .map(|f| {
            let s = f as f64 * speed;
            let (center, yaw) = match motion {
                CameraMotion::Truck => (Vector3::new(s, 0.0, 0.0), 0.0),
                CameraMotion::Dolly => (Vector3::new(0.0, 0.0, s), 0.0),
                CameraMotion::Pedestal => (Vector3::new(0.0, -s, 0.0), 0.0),
                CameraMotion::PanTruck => (Vector3::new(-s, 0.0, 0.0), f as f64 * yaw_rate),
            };
            // camera-to-world rotation is a yaw about +y
            let r = rotation_about(Vector3::y(), yaw).transpose();
            Ok(CameraFrame {
                timestamp: f as u64 * 33_333,
                intrinsics,
                extrinsics: Extrinsics::new(r, -(r * center))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CameraTrajectory::new(frames)
}

/// Smooth procedural wall colour in `[0, 1]` at wall coordinates `(x, y)`.
fn wall_color(x: f64, y: f64, phase: &[f64; 6]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (k, v) in c.iter_mut().enumerate() {
        let a = (2.1 * x + phase[k]).sin() * (1.7 * y + phase[k + 3]).cos();
        let b = (0.9 * (x + y) + phase[(k + 1) % 6]).sin();
        *v = (0.5 + 0.3 * a + 0.2 * b).clamp(0.0, 1.0);
    }
    c
}

fn render(
    trajectory: &CameraTrajectory,
    raster: &Tensor,
    phase: &[f64; 6],
    h: usize,
    w: usize,
) -> Tensor {
    let t = trajectory.len();
    let plane = h * w;
    let mut data = vec![0.0; 3 * t * plane];
    for (f, frame) in trajectory.frames.iter().enumerate() {
        let k = frame.intrinsics.to_pixels(h, w);
        let rt = frame.extrinsics.rotation.transpose();
        let origin = frame.extrinsics.camera_center();
        for y in 0..h {
            for x in 0..w {
                let dir = rt * k.unproject(x as f64 + 0.5, y as f64 + 0.5);
                let color = if dir.z > 1e-9 {
                    let s = (WALL_Z - origin.z) / dir.z;
                    let hit = origin + dir * s;
                    wall_color(hit.x, hit.y, phase)
                } else {
                    [0.0; 3]
                };
                let at = |c: usize| (c * t + f) * plane + y * w + x;
                let person = (0..3).any(|c| raster.data()[at(c)] > 0.0);
                for (c, v) in color.iter().enumerate() {
                    let v = if person { raster.data()[at(c)] } else { *v };
                    data[at(c)] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Tensor::new(vec![3, t, h, w], data).expect("video shape")
}

/// Walker that stays in frame for `frames` steps at resolution `h x w`.
pub fn synth_walker_spec(rng: &mut Rng, frames: usize, h: usize, w: usize) -> MotionSpec {
    let (hf, wf) = (h as f64, w as f64);
    let rightward = rng.uniform() < 0.5;
    let span = rng.uniform_range(0.15, 0.3) * wf;
    let vx = span / frames.max(1) as f64;
    let x0 = if rightward {
        rng.uniform_range(0.2, 0.35) * wf
    } else {
        rng.uniform_range(0.65, 0.8) * wf
    };
    let vy = rng.uniform_range(-0.02, 0.02) * hf;
    MotionSpec {
        path: PathSpec::Line {
            start: (x0, rng.uniform_range(0.5, 0.6) * hf),
            velocity: (if rightward { vx } else { -vx }, vy),
        },
        gait_amplitude: rng.uniform_range(0.35, 0.6),
        gait_frequency: rng.uniform_range(0.12, 0.2),
        body_height: rng.uniform_range(0.55, 0.7) * hf,
    }
}

/// Deterministic clip `index` of a dataset seeded with `seed`.
pub fn generate_clip(
    seed: u64,
    index: usize,
    camera_only: bool,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Clip> {
    let mut rng = Rng::stream_indexed(seed, "clip", &[index as u64]);
    let motion = CameraMotion::ALL[index % CameraMotion::ALL.len()];
    let trajectory = synth_trajectory(motion, frames, &mut rng)?;
    let mut phase = [0.0; 6];
    for p in &mut phase {
        *p = rng.uniform_range(0.0, std::f64::consts::TAU);
    }
    let skeletons: SkeletonSequence = if camera_only {
        vec![Vec::new(); frames]
    } else {
        let spec = synth_walker_spec(&mut rng, frames, h, w);
        let walker_seed = rng.below(u32::MAX as usize) as u64;
        synth_skeleton_sequence(walker_seed, frames, &spec)
            .into_iter()
            .map(|s| vec![s])
            .collect()
    };
    let raster = pose_raster(&skeletons, frames, h, w);
    let video = render(&trajectory, &raster, &phase, h, w);
    Ok(Clip {
        id: format!("clip{index:03}"),
        prompt: if camera_only {
            SCENE_PROMPT
        } else {
            HUMAN_PROMPT
        }
        .to_string(),
        video,
        trajectory,
        skeletons,
    })
}

/// `round(fraction * clips)` clips are camera-only; they take the last indices.
pub fn camera_only_count(clips: usize, fraction: f64) -> usize {
    ((fraction * clips as f64).round() as usize).min(clips)
}

pub fn generate_dataset(
    seed: u64,
    clips: usize,
    camera_only_fraction: f64,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Vec<Clip>> {
    let blank = camera_only_count(clips, camera_only_fraction);
    (0..clips)
        .map(|i| generate_clip(seed, i, i >= clips - blank, frames, h, w))
        .collect()
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CoreError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

pub struct ClipPaths {
    pub video: PathBuf,
    pub trajectory: PathBuf,
    pub skeletons: PathBuf,
}

pub fn clip_paths(dir: &Path, id: &str) -> ClipPaths {
    ClipPaths {
        video: dir.join(format!("{id}.video.ten1")),
        trajectory: dir.join(format!("{id}.traj.txt")),
        skeletons: dir.join(format!("{id}.skel.txt")),
    }
}

/// Writes each clip's three files plus `index.txt` (`id<TAB>prompt`).
pub fn save_dataset(dir: &Path, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut index = String::new();
    for clip in clips {
        let p = clip_paths(dir, &clip.id);
        clip.video.save(&p.video)?;
        write(
            &p.trajectory,
            serialize_trajectory(&clip.id, &clip.trajectory).as_bytes(),
        )?;
        write(
            &p.skeletons,
            serialize_skeletons(&clip.skeletons).as_bytes(),
        )?;
        index.push_str(&format!("{}\t{}\n", clip.id, clip.prompt));
    }
    write(&dir.join(INDEX_FILE), index.as_bytes())
}

pub fn load_clip(dir: &Path, id: &str, prompt: &str) -> Result<Clip> {
    let p = clip_paths(dir, id);
    let video = Tensor::load(&p.video)?;
    let (_, trajectory) = parse_trajectory_file(&read(&p.trajectory)?)?;
    let mut skeletons = parse_skeletons(&read(&p.skeletons)?)?;
    let frames = video.shape().get(1).copied().unwrap_or(0);
    if trajectory.len() != frames || skeletons.len() > frames {
        return Err(CoreError::Validation(format!(
            "clip {id}: video has {frames} frames, trajectory {}, skeletons {}",
            trajectory.len(),
            skeletons.len()
        )));
    }
    skeletons.resize(frames, Vec::new());
    Ok(Clip {
        id: id.to_string(),
        prompt: prompt.to_string(),
        video,
        trajectory,
        skeletons,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let index = read(&dir.join(INDEX_FILE))?;
    index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, prompt) = l.split_once('\t').unwrap_or((l, ""));
            load_clip(dir, id.trim(), prompt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_in_range() {
        let a = generate_clip(3, 1, false, 4, 16, 16).unwrap();
        let b = generate_clip(3, 1, false, 4, 16, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.video.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.has_people());
        let c = generate_clip(3, 1, true, 4, 16, 16).unwrap();
        assert!(!c.has_people());
        assert_eq!(c.prompt, SCENE_PROMPT);
    }

    #[test]
    fn camera_only_fraction_counts() {
        assert_eq!(camera_only_count(8, 0.5), 4);
        let clips = generate_dataset(1, 8, 0.5, 2, 8, 8).unwrap();
        assert_eq!(clips.iter().filter(|c| !c.has_people()).count(), 4);
    }

    #[test]
    fn motion_types_translate_in_distinct_directions() {
        let mut rng = Rng::new(0);
        let dirs: Vec<Vector3<f64>> = CameraMotion::ALL
            .iter()
            .map(|&m| {
                let t = synth_trajectory(m, 3, &mut rng).unwrap();
                let c =
                    t.frames[2].extrinsics.camera_center() - t.frames[0].extrinsics.camera_center();
                c.normalize()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((dirs[i] - dirs[j]).norm() > 0.5, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate_dataset(5, 3, 1.0 / 3.0, 2, 8, 8).unwrap();
        save_dataset(dir.path(), &clips).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.video, b.video);
            assert_eq!(a.skeletons, b.skeletons);
            assert_eq!(a.prompt, b.prompt);
            for (fa, fb) in a.trajectory.frames.iter().zip(&b.trajectory.frames) {
                assert!(
                    (fa.extrinsics.rotation - fb.extrinsics.rotation)
                        .abs()
                        .max()
                        < 1e-12
                );
            }
        }
    }
}
