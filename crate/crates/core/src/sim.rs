//! Discrete-event simulation of the camera → inference → pose pipeline.
//!
//! Frames arrive at `k/fps`. A single inference slot serves them; under
//! [`Policy::DropIfBusy`] a frame arriving while the slot is busy is discarded,
//! under [`Policy::Block`] the source waits for the slot. A frame arriving at
//! the exact instant an inference completes is accepted. Event times are kept
//! on an integer nanosecond grid so that tie is decided exactly.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{load_trajectory_csv, translation_error, Pose, Quaternion, Trajectory};
use crate::stats::{mean, median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Constant,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceModel {
    pub kind: ServiceKind,
    pub mean_s: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ServiceModel {
    pub fn constant(mean_s: f64) -> Self {
        Self { kind: ServiceKind::Constant, mean_s, sigma: 0.0, seed: 0 }
    }

    pub fn lognormal(mean_s: f64, sigma: f64, seed: u64) -> Self {
        Self { kind: ServiceKind::Lognormal, mean_s, sigma, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.mean_s > 0.0) || !self.mean_s.is_finite() {
            return Err(Error::InvalidArgument(format!("service mean_s must be > 0, got {}", self.mean_s)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("service sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Service-time source; lognormal draws use `μ = ln(mean) − σ²/2` so the
/// distribution mean equals `mean_s`.
#[allow(clippy::large_enum_variant)]
enum Sampler {
    Constant(f64),
    Lognormal(LogNormal<f64>, ChaCha8Rng),
}

impl Sampler {
    fn new(m: &ServiceModel) -> Result<Self> {
        Ok(match m.kind {
            ServiceKind::Constant => Sampler::Constant(m.mean_s),
            ServiceKind::Lognormal => {
                let mu = m.mean_s.ln() - m.sigma * m.sigma / 2.0;
                let dist = LogNormal::new(mu, m.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Sampler::Lognormal(dist, ChaCha8Rng::seed_from_u64(m.seed))
            }
        })
    }

    fn next(&mut self) -> f64 {
        match self {
            Sampler::Constant(v) => *v,
            Sampler::Lognormal(d, rng) => d.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "drop")]
    DropIfBusy,
    #[serde(rename = "block")]
    Block,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" | "drop-if-busy" => Ok(Policy::DropIfBusy),
            "block" => Ok(Policy::Block),
            other => Err(Error::InvalidArgument(format!("unknown policy {other:?} (drop|block)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub fps: f64,
    pub duration_s: f64,
    pub policy: Policy,
    pub service: ServiceModel,
    /// Ground-truth pose per captured frame, for coverage reporting.
    pub route: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub frames_captured: u64,
    pub poses_produced: u64,
    pub frames_dropped: u64,
    /// Completion instant of every produced pose, seconds.
    pub pose_timestamps: Vec<f64>,
    /// Frame index of every produced pose.
    pub pose_frames: Vec<u64>,
    pub covered_distance_m: Option<f64>,
    pub mean_service_s: f64,
    pub median_service_s: f64,
}

const NS: f64 = 1e9;

fn to_ns(t: f64) -> i64 {
    (t * NS).round() as i64
}

fn arrival_ns(k: u64, fps: f64) -> i64 {
    to_ns(k as f64 / fps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    // Completions sort first so an arrival at the same instant sees a free slot.
    Completion,
    Arrival,
}

pub fn simulate_realtime(s: &SimScenario) -> Result<SimReport> {
    if !(s.fps > 0.0) || !s.fps.is_finite() || !(s.duration_s > 0.0) || !s.duration_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "fps and duration must be > 0 (fps {}, duration {})",
            s.fps, s.duration_s
        )));
    }
    s.service.validate()?;
    let end_ns = to_ns(s.duration_s);
    let mut sampler = Sampler::new(&s.service)?;

    let mut queue: BinaryHeap<Reverse<(i64, EventKind, u64)>> = BinaryHeap::new();
    queue.push(Reverse((0, EventKind::Arrival, 0)));
    let mut busy = false;
    let (mut captured, mut dropped) = (0u64, 0u64);
    let mut pose_timestamps = Vec::new();
    let mut pose_frames = Vec::new();
    let mut services = Vec::new();

    while let Some(Reverse((now, kind, frame))) = queue.pop() {
        match kind {
            EventKind::Arrival => {
                captured += 1;
                if busy {
                    dropped += 1;
                } else {
                    busy = true;
                    let service = sampler.next();
                    services.push(service);
                    pose_frames.push(frame);
                    queue.push(Reverse((now + to_ns(service), EventKind::Completion, frame)));
                }
                if s.policy == Policy::DropIfBusy {
                    let next = arrival_ns(frame + 1, s.fps);
                    if next < end_ns {
                        queue.push(Reverse((next, EventKind::Arrival, frame + 1)));
                    }
                }
            }
            EventKind::Completion => {
                busy = false;
                pose_timestamps.push(now as f64 / NS);
                if s.policy == Policy::Block {
                    // The source held the next frame until the slot freed up.
                    let next = arrival_ns(frame + 1, s.fps).max(now);
                    if next < end_ns {
                        queue.push(Reverse((next, EventKind::Arrival, frame + 1)));
                    }
                }
            }
        }
    }

    let covered_distance_m = match &s.route {
        Some(route) => {
            let last = *pose_frames.last().unwrap_or(&0) as usize;
            if last >= route.len() {
                return Err(Error::InvalidArgument(format!(
                    "route has {} samples, frame {} was processed",
                    route.len(),
                    last
                )));
            }
            Some(covered_distance(route, last + 1)?)
        }
        None => None,
    };

    Ok(SimReport {
        frames_captured: captured,
        poses_produced: pose_frames.len() as u64,
        frames_dropped: dropped,
        pose_timestamps,
        pose_frames,
        covered_distance_m,
        mean_service_s: mean(&services),
        median_service_s: median(&services),
    })
}

impl SimReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "frames_captured,{}", self.frames_captured);
        let _ = writeln!(out, "poses_produced,{}", self.poses_produced);
        let _ = writeln!(out, "frames_dropped,{}", self.frames_dropped);
        let _ = writeln!(out, "mean_service_s,{:.9}", self.mean_service_s);
        let _ = writeln!(out, "median_service_s,{:.9}", self.median_service_s);
        if let Some(d) = self.covered_distance_m {
            let _ = writeln!(out, "covered_distance_m,{d:.9}");
        }
        out
    }

    pub fn poses_csv(&self) -> String {
        let mut out = String::from("pose,frame,timestamp_s\n");
        for (i, (f, t)) in self.pose_frames.iter().zip(&self.pose_timestamps).enumerate() {
            let _ = writeln!(out, "{i},{f},{t:.9}");
        }
        out
    }
}

/// Polyline length over the first `n` route samples.
pub fn covered_distance(route: &Trajectory, n: usize) -> Result<f64> {
    if n == 0 || n > route.len() {
        return Err(Error::InvalidArgument(format!("n_processed {n} outside 1..={}", route.len())));
    }
    route.samples[..n].windows(2).map(|w| translation_error(w[0].1.t, w[1].1.t)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub per_frame_s: f64,
    pub frames_processed: usize,
    pub covered_distance_m: f64,
}

/// Sequential replay of a recorded log: each frame takes `per_frame_s`, so
/// `min(frame_count, floor(wall/per_frame))` frames (at least one) finish.
pub fn simulate_replay(
    frame_count: usize,
    per_frame_s: f64,
    wall_time_s: f64,
    route: &Trajectory,
) -> Result<CoverageReport> {
    if frame_count == 0 || !(per_frame_s > 0.0) || !(wall_time_s > 0.0) {
        return Err(Error::InvalidArgument("frame_count, per_frame_s and wall_time_s must be positive".into()));
    }
    if route.len() < frame_count {
        return Err(Error::InvalidArgument(format!("route has {} poses, need {frame_count}", route.len())));
    }
    let fit = (wall_time_s / per_frame_s + 1e-9).floor() as usize;
    let processed = fit.clamp(1, frame_count);
    Ok(CoverageReport {
        per_frame_s,
        frames_processed: processed,
        covered_distance_m: covered_distance(route, processed)?,
    })
}

/// `samples` poses evenly spaced around a circle of circumference `length_m`,
/// timestamped at `k/fps`, heading tangent to the circle.
pub fn loop_route(length_m: f64, samples: usize, fps: f64) -> Result<Trajectory> {
    let radius = length_m / std::f64::consts::TAU;
    Trajectory::new(
        (0..samples)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / samples as f64;
                let pose = Pose::new(
                    [radius * a.cos(), radius * a.sin(), 0.0],
                    Quaternion::from_yaw(a + std::f64::consts::FRAC_PI_2),
                );
                (k as f64 / fps, pose)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RouteSource {
    Csv(PathBuf),
    Loop { length_m: f64, samples: usize, fps: f64 },
}

impl RouteSource {
    pub fn load(&self, base: &Path) -> Result<Trajectory> {
        match self {
            RouteSource::Csv(p) => load_trajectory_csv(base.join(p)),
            RouteSource::Loop { length_m, samples, fps } => loop_route(*length_m, *samples, *fps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRun {
    pub name: String,
    pub per_frame_s: f64,
}

/// Scenario file consumed by `splitloc simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimConfig {
    Realtime {
        fps: f64,
        duration_s: f64,
        policy: Policy,
        service: ServiceModel,
        #[serde(default)]
        route_csv: Option<PathBuf>,
    },
    Replay {
        frame_count: usize,
        wall_time_s: f64,
        route: RouteSource,
        runs: Vec<ReplayRun>,
    },
}

pub enum SimOutput {
    Realtime(SimReport),
    Replay(Vec<(String, CoverageReport)>),
}

impl SimConfig {
    /// Runs the scenario; relative paths resolve against `base`.
    pub fn run(&self, base: &Path) -> Result<SimOutput> {
        match self {
            SimConfig::Realtime { fps, duration_s, policy, service, route_csv } => {
                let route = route_csv.as_ref().map(|p| load_trajectory_csv(base.join(p))).transpose()?;
                let scenario =
                    SimScenario { fps: *fps, duration_s: *duration_s, policy: *policy, service: *service, route };
                Ok(SimOutput::Realtime(simulate_realtime(&scenario)?))
            }
            SimConfig::Replay { frame_count, wall_time_s, route, runs } => {
                if runs.is_empty() {
                    return Err(Error::Config("runs: at least one run required".into()));
                }
                let route = route.load(base)?;
                let reports = runs
                    .iter()
                    .map(|r| Ok((r.name.clone(), simulate_replay(*frame_count, r.per_frame_s, *wall_time_s, &route)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SimOutput::Replay(reports))
            }
        }
    }
}

pub fn coverage_csv(reports: &[(String, CoverageReport)]) -> String {
    let mut out = String::from("run,per_frame_s,frames_processed,covered_distance_m\n");
    for (name, r) in reports {
        let _ = writeln!(out, "{name},{},{},{:.9}", r.per_frame_s, r.frames_processed, r.covered_distance_m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(fps: f64, service: f64, duration: f64, policy: Policy) -> SimScenario {
        SimScenario { fps, duration_s: duration, policy, service: ServiceModel::constant(service), route: None }
    }

    #[test]
    fn one_second_service_at_30fps() {
        let r = simulate_realtime(&scenario(30.0, 1.0, 10.0, Policy::DropIfBusy)).unwrap();
        assert_eq!((r.poses_produced, r.frames_dropped, r.frames_captured), (10, 290, 300));
        assert_eq!(r.pose_frames, (0..10).map(|k| k * 30).collect::<Vec<_>>());
    }

    #[test]
    fn quarter_second_service_at_30fps() {
        // Hand trace: service ends at 0.25 s, next grid arrival is 8/30 s, so
        // acceptances fall every 8 frames: 0, 8, ..., 296 → 38 poses.
        let r = simulate_realtime(&scenario(30.0, 0.25, 10.0, Policy::DropIfBusy)).unwrap();
        assert_eq!(r.poses_produced, 38);
        assert_eq!(r.pose_frames.last(), Some(&296));
        assert_eq!(r.frames_captured, r.poses_produced + r.frames_dropped);
    }

    #[test]
    fn block_policy_paces_source() {
        let r = simulate_realtime(&scenario(30.0, 0.5, 10.0, Policy::Block)).unwrap();
        assert_eq!((r.poses_produced, r.frames_dropped), (20, 0));
        let r = simulate_realtime(&scenario(5.0, 0.2, 1.0, Policy::Block)).unwrap();
        assert_eq!(r.poses_produced, 5);
        assert!((r.pose_timestamps.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lognormal_is_seed_deterministic() {
        let mk = |seed| SimScenario {
            service: ServiceModel::lognormal(0.3, 0.4, seed),
            ..scenario(30.0, 0.3, 20.0, Policy::DropIfBusy)
        };
        let a = simulate_realtime(&mk(3)).unwrap();
        assert_eq!(a, simulate_realtime(&mk(3)).unwrap());
        assert_ne!(a.pose_timestamps, simulate_realtime(&mk(4)).unwrap().pose_timestamps);
        assert!(a.poses_produced as f64 * a.mean_service_s <= 20.0 + a.mean_service_s * 3.0);
    }

    #[test]
    fn invalid_scenarios() {
        assert!(simulate_realtime(&scenario(0.0, 1.0, 1.0, Policy::Block)).is_err());
        assert!(simulate_realtime(&scenario(30.0, 0.0, 1.0, Policy::Block)).is_err());
        let mut s = scenario(30.0, 1.0, 1.0, Policy::Block);
        s.service.sigma = -1.0;
        assert!(simulate_realtime(&s).is_err());
    }

    fn line(spacing: f64, n: usize) -> Trajectory {
        Trajectory::new(
            (0..n).map(|k| (k as f64, Pose::new([k as f64 * spacing, 0.0, 0.0], Quaternion::IDENTITY))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn covered_distance_examples() {
        let route = line(0.5, 20);
        assert_eq!(covered_distance(&route, 1).unwrap(), 0.0);
        assert!((covered_distance(&route, 11).unwrap() - 5.0).abs() < 1e-12);
        assert!(covered_distance(&route, 0).is_err());
        assert!(covered_distance(&route, 21).is_err());

        let circle = Trajectory::new(
            (0..360)
                .map(|k| {
                    let a = (k as f64).to_radians();
                    (k as f64, Pose::new([a.cos(), a.sin(), 0.0], Quaternion::IDENTITY))
                })
                .collect(),
        )
        .unwrap();
        let chord_sum = 359.0 * 2.0 * (std::f64::consts::PI / 360.0).sin();
        let d = covered_distance(&circle, 360).unwrap();
        assert!((d - chord_sum).abs() < 1e-9);
        assert!((d / (std::f64::consts::TAU * 359.0 / 360.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn replay_examples() {
        let route = loop_route(900.0, 3000, 30.0).unwrap();
        let local = simulate_replay(3000, 1.0, 300.0, &route).unwrap();
        assert_eq!(local.frames_processed, 300);
        assert!((local.covered_distance_m - 89.7).abs() < 1e-3);
        let offload = simulate_replay(3000, 0.25, 300.0, &route).unwrap();
        assert_eq!(offload.frames_processed, 1200);
        assert!((offload.covered_distance_m - 359.7).abs() < 1e-3);
        let slow = simulate_replay(3000, 400.0, 300.0, &route).unwrap();
        assert_eq!((slow.frames_processed, slow.covered_distance_m), (1, 0.0));
        assert!(simulate_replay(4000, 1.0, 300.0, &route).is_err());
    }

    #[test]
    fn realtime_with_route_reports_coverage() {
        let route = line(0.1, 300);
        let s = SimScenario { route: Some(route), ..scenario(30.0, 1.0, 10.0, Policy::DropIfBusy) };
        let r = simulate_realtime(&s).unwrap();
        // last accepted frame is 270
        assert!((r.covered_distance_m.unwrap() - 27.0).abs() < 1e-9);
    }

    #[test]
    fn config_schema() {
        let cfg: SimConfig = serde_json::from_str(
            r#"{"mode":"realtime","fps":30,"duration_s":10,"policy":"drop","service":{"kind":"constant","mean_s":1.0}}"#,
        )
        .unwrap();
        match cfg.run(Path::new(".")).unwrap() {
            SimOutput::Realtime(r) => assert_eq!(r.poses_produced, 10),
            SimOutput::Replay(_) => panic!(),
        }
        assert!(serde_json::from_str::<SimConfig>("{}").is_err());
        assert!(serde_json::from_str::<SimConfig>(r#"{"mode":"realtime","fps":30,"bogus":1}"#).is_err());
    }
}
