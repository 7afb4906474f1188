//! Camera alignment (RotErr, TransErr, KptsErr) and human-motion alignment
//! (PoseErr, DetErr) metrics, plus the report container.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use tokenmotion_tensor::Tensor;

use crate::camera::{relative_pose, CameraTrajectory, Extrinsics};
use crate::error::{CoreError, Result};
use crate::pose::Skeleton;

pub const METRIC_NAMES: [&str; 5] = ["rot_err", "trans_err", "kpts_err", "pose_err", "det_err"];
pub const PROBE_DEPTHS: [f64; 3] = [2.0, 4.0, 8.0];
pub const PROBE_SIDE: usize = 5;

fn check_lengths(gt: &CameraTrajectory, est: &CameraTrajectory) -> Result<()> {
    if gt.len() != est.len() {
        return Err(CoreError::Validation(format!(
            "trajectory lengths differ: {} vs {}",
            gt.len(),
            est.len()
        )));
    }
    Ok(())
}

fn step_relatives(traj: &CameraTrajectory) -> Vec<Extrinsics> {
    traj.frames
        .windows(2)
        .map(|w| relative_pose(&w[0].extrinsics, &w[1].extrinsics))
        .collect()
}

/// Geodesic angle in degrees between two rotations.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Mean geodesic distance between per-step relative rotations, in degrees.
pub fn rot_err(gt: &CameraTrajectory, est: &CameraTrajectory) -> Result<f64> {
    check_lengths(gt, est)?;
    let (g, e) = (step_relatives(gt), step_relatives(est));
    if g.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "rot_err needs at least two frames".into(),
        ));
    }
    let total: f64 = g
        .iter()
        .zip(&e)
        .map(|(a, b)| rotation_angle_deg(&a.rotation, &b.rotation))
        .sum();
    Ok(total / g.len() as f64)
}

/// Mean distance between unit per-step relative translation directions.
/// Steps where either side does not translate are skipped.
pub fn trans_err(gt: &CameraTrajectory, est: &CameraTrajectory) -> Result<f64> {
    check_lengths(gt, est)?;
    let dists: Vec<f64> = step_relatives(gt)
        .iter()
        .zip(&step_relatives(est))
        .filter_map(|(a, b)| {
            let (na, nb) = (a.translation.norm(), b.translation.norm());
            (na > 1e-12 && nb > 1e-12).then(|| (a.translation / na - b.translation / nb).norm())
        })
        .collect();
    if dists.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "trans_err: every step is degenerate (zero translation)".into(),
        ));
    }
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// World-space probe grid: `5 x 5` pixels spanning the central 80% of the
/// first ground-truth frame at each probe depth.
pub fn probe_points(gt: &CameraTrajectory, height: usize, width: usize) -> Vec<Vector3<f64>> {
    let first = &gt.frames[0];
    let k = first.intrinsics.to_pixels(height, width);
    let inv = first.extrinsics.rotation.transpose();
    let t = first.extrinsics.translation;
    let mut pts = Vec::with_capacity(PROBE_SIDE * PROBE_SIDE * PROBE_DEPTHS.len());
    for &depth in &PROBE_DEPTHS {
        for j in 0..PROBE_SIDE {
            for i in 0..PROBE_SIDE {
                let fu = 0.1 + 0.8 * i as f64 / (PROBE_SIDE - 1) as f64;
                let fv = 0.1 + 0.8 * j as f64 / (PROBE_SIDE - 1) as f64;
                let cam = k.unproject(fu * width as f64, fv * height as f64) * depth;
                pts.push(inv * (cam - t));
            }
        }
    }
    pts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KptsErr {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Mean pixel distance between probe points projected through the ground
/// truth and the estimated cameras. Probes behind either camera are skipped.
pub fn kpts_err(
    gt: &CameraTrajectory,
    est: &CameraTrajectory,
    probes: &[Vector3<f64>],
    height: usize,
    width: usize,
) -> Result<KptsErr> {
    check_lengths(gt, est)?;
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (fg, fe) in gt.frames.iter().zip(&est.frames) {
        let (kg, ke) = (
            fg.intrinsics.to_pixels(height, width),
            fe.intrinsics.to_pixels(height, width),
        );
        for p in probes {
            let (pg, pe) = (fg.extrinsics.transform(p), fe.extrinsics.transform(p));
            if pg.z <= 1e-9 || pe.z <= 1e-9 {
                skipped += 1;
                continue;
            }
            let (a, b) = (kg.project(&pg), ke.project(&pe));
            total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            used += 1;
        }
    }
    if used == 0 {
        return Err(CoreError::UndefinedMetric(
            "kpts_err: every probe lies behind a camera".into(),
        ));
    }
    Ok(KptsErr {
        mean: total / used as f64,
        used,
        skipped,
    })
}

fn check_frames(gt: &[Vec<Skeleton>], est: &[Vec<Skeleton>]) -> Result<()> {
    if gt.len() != est.len() {
        return Err(CoreError::Validation(format!(
            "skeleton sequences differ in length: {} vs {}",
            gt.len(),
            est.len()
        )));
    }
    Ok(())
}

/// Pairs of (gt, est) skeletons with equal person ids, frame by frame.
/// Persons missing from `est` pair with `None`.
fn matched<'a>(
    gt: &'a [Vec<Skeleton>],
    est: &'a [Vec<Skeleton>],
) -> impl Iterator<Item = (&'a Skeleton, Option<&'a Skeleton>)> {
    gt.iter().zip(est).flat_map(|(g, e)| {
        g.iter()
            .map(move |gs| (gs, e.iter().find(|es| es.person_id == gs.person_id)))
    })
}

/// Mean joint distance over joints detected in both sequences.
pub fn pose_err(gt: &[Vec<Skeleton>], est: &[Vec<Skeleton>]) -> Result<f64> {
    check_frames(gt, est)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (g, e) in matched(gt, est) {
        let Some(e) = e else { continue };
        for (a, b) in g.joints.iter().zip(&e.joints) {
            if a.detected() && b.detected() {
                total += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoreError::UndefinedMetric(
            "pose_err: no mutually detected joints".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Percentage of ground-truth detected joints that the estimate misses.
/// Zero when the ground truth has no detected joints.
pub fn det_err(gt: &[Vec<Skeleton>], est: &[Vec<Skeleton>]) -> Result<f64> {
    check_frames(gt, est)?;
    let (mut missed, mut total) = (0usize, 0usize);
    for (g, e) in matched(gt, est) {
        for (k, a) in g.joints.iter().enumerate() {
            if a.detected() {
                total += 1;
                if !e.is_some_and(|e| e.joints[k].detected()) {
                    missed += 1;
                }
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * missed as f64 / total as f64)
}

/// Stand-in motion estimator: index and RMS distance of the reference video
/// closest to `video` in pixel L2. The caller reads camera and pose off the
/// retrieved clip. Ties go to the lower index.
pub fn nearest_reference(video: &Tensor, refs: &[&Tensor]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in refs.iter().enumerate() {
        if r.shape() != video.shape() {
            return Err(CoreError::Validation(format!(
                "reference {i} has shape {:?}, video has {:?}",
                r.shape(),
                video.shape()
            )));
        }
        let sq: f64 = r
            .data()
            .iter()
            .zip(video.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rms = (sq / video.numel().max(1) as f64).sqrt();
        if best.map_or(true, |(_, d)| rms < d) {
            best = Some((i, rms));
        }
    }
    best.ok_or_else(|| CoreError::Validation("no reference videos".into()))
}

/// One generated/reference pair's inputs to the metric battery.
pub struct SamplePair<'a> {
    pub name: String,
    pub gt_camera: &'a CameraTrajectory,
    pub est_camera: &'a CameraTrajectory,
    pub gt_pose: &'a [Vec<Skeleton>],
    pub est_pose: &'a [Vec<Skeleton>],
    pub height: usize,
    pub width: usize,
}

/// Per-sample values for each metric; a metric that is undefined for a
/// sample (for example pose error on a clip without people) is omitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<String>,
    pub values: BTreeMap<String, Vec<(String, f64)>>,
}

impl MetricReport {
    pub fn evaluate(pairs: &[SamplePair<'_>]) -> Result<Self> {
        let mut report = Self::default();
        for name in METRIC_NAMES {
            report.values.insert(name.to_string(), Vec::new());
        }
        for p in pairs {
            report.samples.push(p.name.clone());
            let probes = probe_points(p.gt_camera, p.height, p.width);
            let results = [
                rot_err(p.gt_camera, p.est_camera),
                trans_err(p.gt_camera, p.est_camera),
                kpts_err(p.gt_camera, p.est_camera, &probes, p.height, p.width).map(|k| k.mean),
                pose_err(p.gt_pose, p.est_pose),
                det_err(p.gt_pose, p.est_pose),
            ];
            for (name, r) in METRIC_NAMES.iter().zip(results) {
                match r {
                    Ok(v) => report
                        .values
                        .get_mut(*name)
                        .expect("metric slot")
                        .push((p.name.clone(), v)),
                    Err(CoreError::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(report)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v = self.values.get(metric)?;
        (!v.is_empty()).then(|| v.iter().map(|(_, x)| x).sum::<f64>() / v.len() as f64)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = format!("samples: {}\n", self.sample_count());
        for name in METRIC_NAMES {
            match self.mean(name) {
                Some(m) => {
                    let n = self.values[name].len();
                    let _ = writeln!(out, "{name:<10} mean {m:>12.6} over {n} samples");
                }
                None => {
                    let _ = writeln!(out, "{name:<10} undefined");
                }
            }
        }
        out
    }

    /// Machine-readable `key=value` lines. Floats use Rust's shortest
    /// round-trip formatting so [`MetricReport::parse_kv`] restores them exactly.
    pub fn to_kv(&self) -> String {
        let mut out = format!("samples={}\n", self.sample_count());
        for s in &self.samples {
            let _ = writeln!(out, "sample={s}");
        }
        for name in METRIC_NAMES {
            if let Some(m) = self.mean(name) {
                let _ = writeln!(out, "{name}.mean={m}");
            }
            for (s, v) in &self.values[name] {
                let _ = writeln!(out, "{name}.{s}={v}");
            }
        }
        out
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut report = Self::default();
        for name in METRIC_NAMES {
            report.values.insert(name.to_string(), Vec::new());
        }
        let mut declared = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| CoreError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match key {
                "samples" => declared = Some(value.parse::<usize>().map_err(|_| bad("bad count"))?),
                "sample" => report.samples.push(value.to_string()),
                _ => {
                    let (metric, sample) = key.split_once('.').ok_or_else(|| bad("unknown key"))?;
                    let slot = report
                        .values
                        .get_mut(metric)
                        .ok_or_else(|| bad("unknown metric"))?;
                    let v: f64 = value.parse().map_err(|_| bad("bad value"))?;
                    if sample != "mean" {
                        slot.push((sample.to_string(), v));
                    }
                }
            }
        }
        if declared != Some(report.samples.len()) {
            return Err(CoreError::Parse {
                line: 1,
                msg: format!(
                    "sample count {declared:?} disagrees with {} listed samples",
                    report.samples.len()
                ),
            });
        }
        Ok(report)
    }
}
