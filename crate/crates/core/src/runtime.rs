//! Live split inference over TCP: a server that runs network suffixes, a client
//! that runs prefixes and offloads, and a drop-if-busy capture loop.

use std::fmt::Write as _;
use std::io::Write as _;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use crate::error::{Error, Result};
use crate::exec::{preprocess, run_prefix, run_suffix, HeadOutput, Tensor};
use crate::frame::{list_image_dir, Frame};
use crate::graph::{build_backbone, Cut, LayerGraph};
use crate::pose::load_trajectory_csv;
use crate::proto::{
    decode_request, encode_request, encode_response, read_request_frame, read_response_frame, InferRequest,
    InferResponse, ReadOutcome, Status, WireError,
};
use crate::sim::Policy;
use crate::stats::{mean, median};
use crate::weights::{init_weights, WeightSet};

/// Graph plus weights, built once and shared read-only.
#[derive(Debug)]
pub struct Model {
    pub graph: LayerGraph,
    pub weights: WeightSet,
}

impl Model {
    pub fn new(resolution: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let graph = build_backbone(resolution, feature_dim)?;
        let weights = init_weights(&graph, seed);
        Ok(Self { graph, weights })
    }
}

/// Sleeps until `started + floor` has elapsed.
fn pad_to(started: Instant, floor: Duration) {
    let spent = started.elapsed();
    if spent < floor {
        thread::sleep(floor - spent);
    }
}

fn throttle_floor(s_per_gflop: Option<f64>, gflops: f64) -> Duration {
    Duration::from_secs_f64(s_per_gflop.unwrap_or(0.0).max(0.0) * gflops)
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub resolution: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub max_sessions: usize,
    /// Minimum seconds per suffix GFLOP, for emulating slower hardware.
    pub throttle_s_per_gflop: Option<f64>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            resolution: crate::graph::DEFAULT_RESOLUTION,
            feature_dim: crate::graph::DEFAULT_FEATURE_DIM,
            seed: 42,
            max_sessions: 16,
            throttle_s_per_gflop: None,
        }
    }
}

/// Answers one encoded request frame.
pub fn handle_request(model: &Model, throttle: Option<f64>, frame: &[u8]) -> InferResponse {
    let started = Instant::now();
    let req = match decode_request(frame) {
        Ok(r) => r,
        Err(e) => {
            let id = crate::proto::peek_request_id(frame).unwrap_or(0);
            debug!(error = %e, "undecodable request");
            return InferResponse::error(id, Status::Internal);
        }
    };
    let Ok(cut) = Cut::from_index(req.cut_index) else {
        return InferResponse::error(req.request_id, Status::BadCut);
    };
    let expected = model.graph.cut_shape(cut);
    if req.shape.len() != expected.len() || req.shape.iter().zip(expected).any(|(a, b)| *a as usize != *b) {
        return InferResponse::error(req.request_id, Status::ShapeMismatch);
    }
    let shape = expected.to_vec();
    let head = Tensor::new(shape, req.payload).and_then(|t| run_suffix(&model.graph, &model.weights, &t, cut));
    match head {
        Ok(head) => {
            pad_to(started, throttle_floor(throttle, model.graph.suffix_gflops(cut)));
            InferResponse {
                request_id: req.request_id,
                status: Status::Ok,
                pose: head.to_array(),
                server_compute_ns: started.elapsed().as_nanos() as u64,
            }
        }
        Err(e) => {
            warn!(error = %e, "suffix execution failed");
            InferResponse::error(req.request_id, Status::Internal)
        }
    }
}

fn session(model: Arc<Model>, throttle: Option<f64>, mut stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    loop {
        match read_request_frame(&mut reader)? {
            Ok(ReadOutcome::Closed) => return Ok(()),
            Ok(ReadOutcome::Frame(bytes)) => {
                let resp = handle_request(&model, throttle, &bytes);
                stream.write_all(&encode_response(&resp))?;
            }
            Err((id, e)) => {
                // Framing is lost; answer if we know who asked, then hang up.
                debug!(error = %e, "framing error");
                if let Some(id) = id {
                    stream.write_all(&encode_response(&InferResponse::error(id, Status::Internal)))?;
                }
                let _ = stream.shutdown(Shutdown::Both);
                return Ok(());
            }
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and joins the accept thread. Open sessions
    /// end when their clients disconnect.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds, builds the model and starts accepting on a background thread.
pub fn spawn_server(cfg: &ServerConfig) -> Result<ServerHandle> {
    if let Some(t) = cfg.throttle_s_per_gflop {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("throttle must be >= 0, got {t}")));
        }
    }
    let model = Arc::new(Model::new(cfg.resolution, cfg.feature_dim, cfg.seed)?);
    let listener =
        TcpListener::bind(&cfg.listen).map_err(|e| Error::Connection(format!("cannot bind {}: {e}", cfg.listen)))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let active = Arc::new(AtomicUsize::new(0));
    let (throttle, max_sessions) = (cfg.throttle_s_per_gflop, cfg.max_sessions.max(1));
    info!(%addr, res = cfg.resolution, feat = cfg.feature_dim, seed = cfg.seed, "server listening");

    let stop_flag = Arc::clone(&stop);
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    continue;
                }
            };
            if active.fetch_add(1, Ordering::SeqCst) >= max_sessions {
                active.fetch_sub(1, Ordering::SeqCst);
                warn!("session limit reached; refusing connection");
                let _ = stream.shutdown(Shutdown::Both);
                continue;
            }
            let (model, active) = (Arc::clone(&model), Arc::clone(&active));
            thread::spawn(move || {
                if let Err(e) = session(model, throttle, stream) {
                    debug!(error = %e, "session ended with io error");
                }
                active.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

/// Runs the server until the process is terminated.
pub fn serve(cfg: &ServerConfig) -> Result<()> {
    spawn_server(cfg)?.wait();
    Ok(())
}

/// One client connection; at most one request is in flight on it.
pub struct Connection {
    stream: TcpStream,
    next_id: u64,
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| Error::Connection(e.to_string()))?
            .next()
            .ok_or_else(|| Error::Connection("address resolved to nothing".into()))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
            .map_err(|e| Error::Connection(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).map_err(|e| Error::Connection(e.to_string()))?;
        Ok(Self { stream, next_id: 1 })
    }

    /// Sends a pre-encoded request and waits for its response.
    pub fn round_trip(&mut self, frame: &[u8]) -> Result<InferResponse> {
        self.stream.write_all(frame).map_err(|e| Error::Connection(format!("send: {e}")))?;
        match read_response_frame(&mut self.stream) {
            Err(e) => Err(Error::Connection(format!("receive: {e}"))),
            Ok(Err(WireError::Incomplete { .. })) => Err(Error::Connection("server closed the connection".into())),
            Ok(Err(e)) => Err(e.into()),
            Ok(Ok(resp)) => Ok(resp),
        }
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// Where the network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Whole network on the device, no server.
    Local,
    /// Layers before the cut on the device, the rest on the server.
    Offload(Cut),
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "local" {
            Ok(Placement::Local)
        } else {
            Cut::from_name(s).map(Placement::Offload)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pose,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTiming {
    pub frame_id: u64,
    /// Scheduled capture instant relative to run start.
    pub capture_t: f64,
    pub preprocess_s: f64,
    pub client_compute_s: f64,
    pub serialize_s: f64,
    pub transfer_s: f64,
    pub server_compute_s: f64,
    pub total_s: f64,
    pub outcome: Outcome,
}

impl FrameTiming {
    pub fn dropped(frame_id: u64, capture_t: f64) -> Self {
        Self {
            frame_id,
            capture_t,
            preprocess_s: 0.0,
            client_compute_s: 0.0,
            serialize_s: 0.0,
            transfer_s: 0.0,
            server_compute_s: 0.0,
            total_s: 0.0,
            outcome: Outcome::Dropped,
        }
    }

    pub fn parts_sum(&self) -> f64 {
        self.preprocess_s + self.client_compute_s + self.serialize_s + self.transfer_s + self.server_compute_s
    }
}

pub const TIMING_HEADER: &str =
    "frame_id,capture_t,preprocess_s,client_compute_s,serialize_s,transfer_s,server_compute_s,total_s,outcome";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub head: HeadOutput,
    pub timing: FrameTiming,
}

/// Client-side execution settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClientOptions {
    /// Minimum seconds per prefix GFLOP on the device.
    pub throttle_s_per_gflop: Option<f64>,
    /// Minimum wall time for a whole frame.
    pub min_frame_s: Option<f64>,
}

/// Preprocess, run `[null, cut)` locally, offload the rest over `conn`.
pub fn client_infer_once(
    conn: &mut Connection,
    model: &Model,
    opts: &ClientOptions,
    cut: Cut,
    frame: &Frame,
    frame_id: u64,
) -> Result<Inference> {
    let t0 = Instant::now();
    let input = preprocess(frame, model.graph.resolution)?;
    let t1 = Instant::now();
    let activation = run_prefix(&model.graph, &model.weights, &input, cut)?;
    pad_to(t1, throttle_floor(opts.throttle_s_per_gflop, model.graph.prefix_gflops(cut)));
    let t2 = Instant::now();
    let request_id = conn.take_id();
    let req = InferRequest {
        request_id,
        cut_index: cut.index(),
        shape: activation.shape.iter().map(|d| *d as u32).collect(),
        payload: activation.data,
    };
    let bytes = encode_request(&req)?;
    let t3 = Instant::now();
    let resp = conn.round_trip(&bytes)?;
    let t4 = Instant::now();
    if resp.request_id != request_id {
        return Err(Error::Connection(format!("response id {} for request {request_id}", resp.request_id)));
    }
    if resp.status != Status::Ok {
        return Err(Error::Remote(resp.status));
    }
    if let Some(min) = opts.min_frame_s {
        pad_to(t0, Duration::from_secs_f64(min));
    }
    let server_compute_s = resp.server_compute_ns as f64 / 1e9;
    let round_trip = (t4 - t3).as_secs_f64();
    let timing = FrameTiming {
        frame_id,
        capture_t: 0.0,
        preprocess_s: (t1 - t0).as_secs_f64(),
        client_compute_s: (t2 - t1).as_secs_f64(),
        serialize_s: (t3 - t2).as_secs_f64(),
        transfer_s: (round_trip - server_compute_s).max(0.0),
        server_compute_s: server_compute_s.min(round_trip),
        total_s: t0.elapsed().as_secs_f64(),
        outcome: Outcome::Pose,
    };
    Ok(Inference { head: HeadOutput::from_array(resp.pose), timing })
}

/// Whole network on the device.
pub fn local_infer_once(model: &Model, opts: &ClientOptions, frame: &Frame, frame_id: u64) -> Result<Inference> {
    let t0 = Instant::now();
    let input = preprocess(frame, model.graph.resolution)?;
    let t1 = Instant::now();
    let head = run_suffix(&model.graph, &model.weights, &input, Cut::NULL)?;
    pad_to(t1, throttle_floor(opts.throttle_s_per_gflop, model.graph.total_flops() as f64 / 1e9));
    if let Some(min) = opts.min_frame_s {
        pad_to(t0, Duration::from_secs_f64(min));
    }
    let t2 = Instant::now();
    let timing = FrameTiming {
        frame_id,
        capture_t: 0.0,
        preprocess_s: (t1 - t0).as_secs_f64(),
        client_compute_s: (t2 - t1).as_secs_f64(),
        serialize_s: 0.0,
        transfer_s: 0.0,
        server_compute_s: 0.0,
        total_s: t0.elapsed().as_secs_f64(),
        outcome: Outcome::Pose,
    };
    Ok(Inference { head, timing })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    /// Pseudo-random frames keyed by `(seed, frame_id)`.
    Synthetic { seed: u64 },
    /// Image files in name order, cycled.
    Directory(PathBuf),
    /// Synthetic frames, one per sample of a trajectory file; the run ends
    /// when the trajectory does.
    TrajectoryReplay(PathBuf),
}

impl std::str::FromStr for FrameSource {
    type Err = Error;

    /// `seeded`, `seeded:SEED`, `dir:PATH` or `traj:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "seeded" => Ok(FrameSource::Synthetic { seed: 7 }),
            Some(("seeded", seed)) => seed
                .parse()
                .map(|seed| FrameSource::Synthetic { seed })
                .map_err(|e| Error::InvalidArgument(format!("bad seed {seed:?}: {e}"))),
            Some(("dir", p)) => Ok(FrameSource::Directory(p.into())),
            Some(("traj", p)) => Ok(FrameSource::TrajectoryReplay(p.into())),
            _ => {
                Err(Error::InvalidArgument(format!("unknown frame source {s:?} (seeded|seeded:N|dir:PATH|traj:PATH)")))
            }
        }
    }
}

/// Opened frame source.
pub struct Frames {
    kind: FramesKind,
    height: usize,
    width: usize,
}

enum FramesKind {
    Synthetic(u64),
    Files(Vec<PathBuf>),
    Replay { seed: u64, len: u64 },
}

impl Frames {
    /// Synthetic frames are `res × 4res/3` so preprocessing crops them.
    pub fn open(src: &FrameSource, resolution: usize) -> Result<Self> {
        let (height, width) = (resolution, resolution * 4 / 3);
        let kind = match src {
            FrameSource::Synthetic { seed } => FramesKind::Synthetic(*seed),
            FrameSource::Directory(dir) => FramesKind::Files(list_image_dir(dir)?),
            FrameSource::TrajectoryReplay(path) => {
                FramesKind::Replay { seed: 7, len: load_trajectory_csv(path)?.len() as u64 }
            }
        };
        Ok(Self { kind, height, width })
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<u64> {
        match &self.kind {
            FramesKind::Replay { len, .. } => Some(*len),
            _ => None,
        }
    }

    pub fn get(&self, frame_id: u64) -> Result<Frame> {
        match &self.kind {
            FramesKind::Synthetic(seed) | FramesKind::Replay { seed, .. } => {
                Ok(Frame::synthetic(*seed, frame_id, self.height, self.width))
            }
            FramesKind::Files(files) => Frame::load(&files[(frame_id % files.len() as u64) as usize]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub server: String,
    pub placement: Placement,
    pub source: FrameSource,
    pub fps: f64,
    pub duration_s: f64,
    pub policy: Policy,
    pub max_frames: Option<u64>,
    pub resolution: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub options: ClientOptions,
    pub retries: u32,
    pub backoff: Duration,
}

impl ClientConfig {
    pub fn new(server: impl Into<String>, placement: Placement) -> Self {
        Self {
            server: server.into(),
            placement,
            source: FrameSource::Synthetic { seed: 7 },
            fps: 30.0,
            duration_s: 10.0,
            policy: Policy::DropIfBusy,
            max_frames: None,
            resolution: crate::graph::DEFAULT_RESOLUTION,
            feature_dim: crate::graph::DEFAULT_FEATURE_DIM,
            seed: 42,
            options: ClientOptions::default(),
            retries: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub timings: Vec<FrameTiming>,
    /// `(frame_id, head output)` per produced pose.
    pub poses: Vec<(u64, HeadOutput)>,
    pub frames_captured: u64,
    pub poses_produced: u64,
    pub frames_dropped: u64,
    pub mean_latency_s: f64,
    pub median_latency_s: f64,
    pub wall_s: f64,
    pub complete: bool,
    pub error: Option<String>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TIMING_HEADER);
        out.push('\n');
        for t in &self.timings {
            let outcome = match t.outcome {
                Outcome::Pose => "pose",
                Outcome::Dropped => "dropped",
            };
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                t.frame_id,
                t.capture_t,
                t.preprocess_s,
                t.client_compute_s,
                t.serialize_s,
                t.transfer_s,
                t.server_compute_s,
                t.total_s,
                outcome
            );
        }
        out
    }
}

fn arrival(k: u64, fps: f64) -> Duration {
    Duration::from_nanos((k as f64 / fps * 1e9).round() as u64)
}

/// First frame index whose scheduled arrival is at or after `t`.
fn first_arrival_at_or_after(t: Duration, fps: f64, from: u64) -> u64 {
    let mut k = ((t.as_secs_f64() * fps).floor() as u64).max(from);
    while arrival(k, fps) < t {
        k += 1;
    }
    while k > from && arrival(k - 1, fps) >= t {
        k -= 1;
    }
    k
}

/// Captures frames on the `k/fps` schedule and runs them one at a time.
/// Under drop-if-busy every frame scheduled while an inference is in flight is
/// recorded as dropped; under block the source waits.
pub fn run_capture_loop(cfg: &ClientConfig) -> Result<RunReport> {
    if !(cfg.fps > 0.0) || !(cfg.duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fps and duration must be > 0 (fps {}, duration {})",
            cfg.fps, cfg.duration_s
        )));
    }
    let model = Model::new(cfg.resolution, cfg.feature_dim, cfg.seed)?;
    let frames = Frames::open(&cfg.source, cfg.resolution)?;
    let limit = match (cfg.max_frames, frames.len()) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let end = Duration::from_secs_f64(cfg.duration_s);
    let mut conn: Option<Connection> = None;

    let mut timings = Vec::new();
    let mut poses = Vec::new();
    let mut error = None;
    let start = Instant::now();
    let mut k = 0u64;
    let in_schedule = |k: u64| arrival(k, cfg.fps) < end && limit.is_none_or(|l| k < l);

    while in_schedule(k) {
        let due = arrival(k, cfg.fps);
        let now = start.elapsed();
        if now < due {
            thread::sleep(due - now);
        }
        let capture_t = start.elapsed().as_secs_f64().max(due.as_secs_f64());
        let frame = frames.get(k)?;

        let mut attempt = 0;
        let result = loop {
            let r = match cfg.placement {
                Placement::Local => local_infer_once(&model, &cfg.options, &frame, k),
                Placement::Offload(cut) => {
                    if conn.is_none() {
                        conn = Connection::connect(&cfg.server).map(Some).unwrap_or_else(|e| {
                            debug!(error = %e, "connect failed");
                            None
                        });
                    }
                    match conn.as_mut() {
                        Some(c) => client_infer_once(c, &model, &cfg.options, cut, &frame, k),
                        None => Err(Error::Connection(format!("cannot reach {}", cfg.server))),
                    }
                }
            };
            match r {
                Err(Error::Connection(msg)) => {
                    conn = None;
                    if attempt >= cfg.retries {
                        break Err(Error::Connection(msg));
                    }
                    attempt += 1;
                    warn!(%msg, attempt, "connection failed; retrying");
                    thread::sleep(cfg.backoff);
                }
                other => break other,
            }
        };
        match result {
            Ok(mut inf) => {
                inf.timing.capture_t = capture_t;
                timings.push(inf.timing);
                poses.push((k, inf.head));
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }

        let done = start.elapsed();
        let next = match cfg.policy {
            Policy::Block => k + 1,
            Policy::DropIfBusy => first_arrival_at_or_after(done, cfg.fps, k + 1),
        };
        for skipped in k + 1..next {
            if !in_schedule(skipped) {
                break;
            }
            timings.push(FrameTiming::dropped(skipped, arrival(skipped, cfg.fps).as_secs_f64()));
        }
        k = next;
    }

    let latencies: Vec<f64> = timings.iter().filter(|t| t.outcome == Outcome::Pose).map(|t| t.total_s).collect();
    let produced = poses.len() as u64;
    let dropped = timings.iter().filter(|t| t.outcome == Outcome::Dropped).count() as u64;
    Ok(RunReport {
        frames_captured: produced + dropped,
        poses_produced: produced,
        frames_dropped: dropped,
        mean_latency_s: mean(&latencies),
        median_latency_s: median(&latencies),
        wall_s: start.elapsed().as_secs_f64(),
        complete: error.is_none(),
        error,
        timings,
        poses,
    })
}

/// Per-cut local timing of preprocess → prefix → encode/decode → suffix, with
/// the given device and server throttles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub cut: Cut,
    pub mean_s: f64,
    pub single_frame_s: f64,
}

pub fn bench_local(
    model: &Model,
    cut: Cut,
    frames: &Frames,
    count: u64,
    client_throttle: Option<f64>,
    server_throttle: Option<f64>,
) -> Result<BenchResult> {
    if count == 0 {
        return Err(Error::InvalidArgument("frame count must be positive".into()));
    }
    let mut times = Vec::with_capacity(count as usize);
    for k in 0..count {
        let frame = frames.get(k)?;
        let t0 = Instant::now();
        let input = preprocess(&frame, model.graph.resolution)?;
        let t1 = Instant::now();
        let act = run_prefix(&model.graph, &model.weights, &input, cut)?;
        pad_to(t1, throttle_floor(client_throttle, model.graph.prefix_gflops(cut)));
        let req = InferRequest {
            request_id: k,
            cut_index: cut.index(),
            shape: act.shape.iter().map(|d| *d as u32).collect(),
            payload: act.data,
        };
        let bytes = encode_request(&req)?;
        let resp = handle_request(model, server_throttle, &bytes);
        if resp.status != Status::Ok {
            return Err(Error::Remote(resp.status));
        }
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(BenchResult { cut, mean_s: mean(&times), single_frame_s: times[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    #[test]
    fn arrival_index_search() {
        let fps = 30.0;
        assert_eq!(first_arrival_at_or_after(Duration::from_secs(1), fps, 1), 30);
        assert_eq!(first_arrival_at_or_after(Duration::from_millis(1001), fps, 1), 31);
        assert_eq!(first_arrival_at_or_after(Duration::from_millis(250), fps, 1), 8);
        assert_eq!(first_arrival_at_or_after(Duration::ZERO, fps, 1), 1);
    }

    #[test]
    fn source_parsing() {
        assert_eq!("seeded".parse::<FrameSource>().unwrap(), FrameSource::Synthetic { seed: 7 });
        assert_eq!("seeded:9".parse::<FrameSource>().unwrap(), FrameSource::Synthetic { seed: 9 });
        assert_eq!("dir:/x".parse::<FrameSource>().unwrap(), FrameSource::Directory("/x".into()));
        assert!("camera".parse::<FrameSource>().is_err());
        assert_eq!("local".parse::<Placement>().unwrap(), Placement::Local);
        assert_eq!("relu".parse::<Placement>().unwrap(), Placement::Offload(Cut::from_index(3).unwrap()));
    }

    #[test]
    fn handle_request_statuses() {
        let model = Model::new(56, 16, 1).unwrap();
        let mut req =
            InferRequest { request_id: 3, cut_index: 200, shape: vec![3, 56, 56], payload: vec![0.0; 3 * 56 * 56] };
        assert_eq!(handle_request(&model, None, &encode_request(&req).unwrap()).status, Status::BadCut);
        req.cut_index = 0;
        let ok = handle_request(&model, None, &encode_request(&req).unwrap());
        assert_eq!((ok.status, ok.request_id), (Status::Ok, 3));
        req.shape = vec![3, 50, 50];
        req.payload = vec![0.0; 7500];
        assert_eq!(handle_request(&model, None, &encode_request(&req).unwrap()).status, Status::ShapeMismatch);
        let mut bytes = encode_request(&req).unwrap();
        bytes[40] ^= 1;
        let r = handle_request(&model, None, &bytes);
        assert_eq!((r.status, r.request_id), (Status::Internal, 3));
    }

    #[test]
    fn server_closing_mid_call_is_a_connection_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let fake = thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = [0u8; 64];
            let _ = s.read(&mut buf);
            drop(s);
        });
        let model = Model::new(56, 16, 1).unwrap();
        let mut conn = Connection::connect(addr).unwrap();
        let frame = Frame::synthetic(1, 0, 56, 56);
        let r = client_infer_once(&mut conn, &model, &ClientOptions::default(), Cut::NULL, &frame, 0);
        assert!(matches!(r, Err(Error::Connection(_))), "{r:?}");
        fake.join().unwrap();
    }

    #[test]
    fn bind_failure_is_startup_error() {
        let held = TcpListener::bind("127.0.0.1:0").unwrap();
        let cfg = ServerConfig {
            listen: held.local_addr().unwrap().to_string(),
            resolution: 56,
            feature_dim: 16,
            ..Default::default()
        };
        assert!(matches!(spawn_server(&cfg), Err(Error::Connection(_))));
        let bad = ServerConfig { resolution: 57, ..cfg };
        assert!(matches!(spawn_server(&bad), Err(Error::InvalidArgument(_))));
    }
}
