use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use tracing::info;

use splitloc_core::fusion::{run_fusion_study, FusionStudyConfig};
use splitloc_core::planner::{
    calibrate_with, measurements_to_csv, parse_measurements_csv, plan, CalibrationOptions, CostProfile, CutMeasurement,
};
use splitloc_core::runtime::{
    bench_local, run_capture_loop, spawn_server, ClientConfig, FrameSource, Frames, Model, Placement, ServerConfig,
};
use splitloc_core::sim::{coverage_csv, Policy, SimConfig, SimOutput};
use splitloc_core::{build_backbone, Cut, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_INSUFFICIENT: u8 = 3;
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "splitloc", version, about = "Split-inference offloading toolkit for camera relocalization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Input resolution (56, 112 or 224).
    #[arg(long = "res", global = true, default_value_t = 224)]
    resolution: usize,
    /// Width of the pose-regression feature layer.
    #[arg(long = "feat", global = true, default_value_t = 2048)]
    feature_dim: usize,
    /// Weight seed.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Directory for output artifacts.
    #[arg(long, global = true, env = "SPLITLOC_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Log filter, e.g. `info` or `splitloc_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-cut inventory (shape, payload bytes, FLOPs) to describe.csv.
    DescribeModel,
    /// Rank cuts under a cost profile; prints the best cut.
    Plan {
        /// Cost profile JSON (as written by `calibrate`).
        #[arg(long)]
        profile: PathBuf,
    },
    /// Fit a cost profile to per-cut latency measurements.
    Calibrate {
        /// CSV with `cut,mean_latency_s[,single_frame_s]` rows.
        #[arg(long)]
        measurements: PathBuf,
        /// Server seconds per GFLOP held fixed during the fit.
        #[arg(long, default_value_t = 0.0)]
        server_rate: f64,
        /// Also fit the single-frame column.
        #[arg(long)]
        include_single_frame: bool,
        /// Weight of single-frame rows relative to mean rows.
        #[arg(long, default_value_t = 0.25)]
        single_frame_weight: f64,
    },
    /// Run the inference server until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Seconds-per-GFLOP floor on suffix execution.
        #[arg(long = "throttle-gflops")]
        throttle: Option<f64>,
        #[arg(long, default_value_t = 16)]
        max_sessions: usize,
    },
    /// Run the capture loop against a server and write a per-frame timing report.
    Client(ClientArgs),
    /// Time preprocess, prefix, encode/decode and suffix in-process for each cut.
    BenchLocal {
        /// Cut name, or `all`.
        #[arg(long, default_value = "all")]
        cut: String,
        #[arg(long, default_value_t = 100)]
        frames: u64,
        /// Frame source: seeded, seeded:N, dir:PATH or traj:PATH.
        #[arg(long, default_value = "seeded")]
        source: String,
        /// Device seconds-per-GFLOP floor on the prefix.
        #[arg(long)]
        client_throttle: Option<f64>,
        /// Server seconds-per-GFLOP floor on the suffix.
        #[arg(long)]
        server_throttle: Option<f64>,
        /// Output CSV (defaults to bench_local.csv in the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a pipeline scenario (realtime or replay) from JSON.
    Simulate { config: PathBuf },
    /// Run a fusion study from JSON.
    Fuse { config: PathBuf },
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    server: String,
    /// Cut name, or `local` to run the whole network on the device.
    #[arg(long, default_value = "null")]
    cut: String,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Run length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// drop (drop-if-busy) or block.
    #[arg(long, default_value = "drop")]
    policy: String,
    /// Frame source: seeded, seeded:N, dir:PATH or traj:PATH.
    #[arg(long, default_value = "seeded")]
    source: String,
    /// Device seconds-per-GFLOP floor on the prefix.
    #[arg(long = "throttle-gflops")]
    throttle: Option<f64>,
    /// Minimum wall time per processed frame, seconds.
    #[arg(long)]
    min_frame_s: Option<f64>,
    #[arg(long)]
    max_frames: Option<u64>,
    /// Output CSV (defaults to client_report.csv in the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_error(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(Error::Config(msg.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn write_artifact(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!(path = %path.display(), "wrote");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InsufficientData(_)) => EXIT_INSUFFICIENT,
        Some(
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } | Error::Validation(_) | Error::Json(_),
        ) => EXIT_CONFIG,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let g = &cli.global;
    let graph = build_backbone(g.resolution, g.feature_dim)?;
    fs::create_dir_all(&g.out_dir)
        .map_err(|e| config_error(format!("output directory {}: {e}", g.out_dir.display())))?;
    let out = |name: &str| g.out_dir.join(name);
    let stdout = &mut std::io::stdout().lock();

    match cli.command {
        Command::DescribeModel => {
            let csv = graph.describe_csv();
            write_artifact(&out("describe.csv"), &csv)?;
            write!(stdout, "{csv}")?;
        }
        Command::Plan { profile } => {
            let profile: CostProfile = read_json(&profile)?;
            let p = plan(&graph, &profile)?;
            write_artifact(&out("plan.csv"), &p.to_csv())?;
            writeln!(stdout, "{}", p.best_cut)?;
        }
        Command::Calibrate { measurements, server_rate, include_single_frame, single_frame_weight } => {
            let text = fs::read_to_string(&measurements)
                .map_err(|e| config_error(format!("{}: {e}", measurements.display())))?;
            let rows = parse_measurements_csv(&text)?;
            let opts =
                CalibrationOptions { server_rate, include_single_frame, single_frame_weight, ..Default::default() };
            let cal = calibrate_with(&graph, &rows, &opts)?;
            write_artifact(&out("profile.json"), &serde_json::to_string_pretty(&cal.profile)?)?;
            write_artifact(&out("calibration.json"), &serde_json::to_string_pretty(&cal)?)?;
            write_artifact(&out("plan.csv"), &plan(&graph, &cal.profile)?.to_csv())?;
            writeln!(stdout, "best_cut {}", cal.best_cut)?;
            writeln!(stdout, "spearman {:.4}", cal.spearman_rho)?;
            writeln!(stdout, "residual_norm {:.6}", cal.residual_norm)?;
        }
        Command::Serve { listen, throttle, max_sessions } => {
            let cfg = ServerConfig {
                listen,
                resolution: g.resolution,
                feature_dim: g.feature_dim,
                seed: g.seed,
                max_sessions,
                throttle_s_per_gflop: throttle,
            };
            let handle = spawn_server(&cfg)?;
            writeln!(stdout, "listening on {}", handle.local_addr())?;
            stdout.flush()?;
            handle.wait();
        }
        Command::Client(args) => {
            let mut cfg = ClientConfig::new(args.server, args.cut.parse::<Placement>()?);
            cfg.fps = args.fps;
            cfg.duration_s = args.duration;
            cfg.policy = args.policy.parse::<Policy>()?;
            cfg.source = args.source.parse::<FrameSource>()?;
            cfg.max_frames = args.max_frames;
            cfg.resolution = g.resolution;
            cfg.feature_dim = g.feature_dim;
            cfg.seed = g.seed;
            cfg.options.throttle_s_per_gflop = args.throttle;
            cfg.options.min_frame_s = args.min_frame_s;
            let report = run_capture_loop(&cfg)?;
            write_artifact(&args.out.unwrap_or_else(|| out("client_report.csv")), &report.to_csv())?;
            writeln!(stdout, "frames_captured {}", report.frames_captured)?;
            writeln!(stdout, "poses_produced {}", report.poses_produced)?;
            writeln!(stdout, "frames_dropped {}", report.frames_dropped)?;
            writeln!(stdout, "mean_latency_s {:.6}", report.mean_latency_s)?;
            writeln!(stdout, "median_latency_s {:.6}", report.median_latency_s)?;
            if let Some(err) = &report.error {
                eprintln!("run incomplete: {err}");
                return Ok(EXIT_INCOMPLETE);
            }
        }
        Command::BenchLocal { cut, frames, source, client_throttle, server_throttle, out: path } => {
            let cuts: Vec<Cut> = if cut == "all" { Cut::all().collect() } else { vec![Cut::from_name(&cut)?] };
            let model = Model::new(g.resolution, g.feature_dim, g.seed)?;
            let frames_src = Frames::open(&source.parse::<FrameSource>()?, g.resolution)?;
            let mut rows = Vec::new();
            for cut in cuts {
                let r = bench_local(&model, cut, &frames_src, frames, client_throttle, server_throttle)?;
                info!(cut = cut.name(), mean_s = r.mean_s, "benchmarked");
                rows.push(CutMeasurement { cut, mean_latency: r.mean_s, single_frame: Some(r.single_frame_s) });
            }
            let csv = measurements_to_csv(&rows);
            write_artifact(&path.unwrap_or_else(|| out("bench_local.csv")), &csv)?;
            write!(stdout, "{csv}")?;
        }
        Command::Simulate { config } => {
            let cfg: SimConfig = read_json(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            match cfg.run(base)? {
                SimOutput::Realtime(r) => {
                    write_artifact(&out("metrics.csv"), &r.metrics_csv())?;
                    write_artifact(&out("poses.csv"), &r.poses_csv())?;
                    write!(stdout, "{}", r.metrics_csv())?;
                }
                SimOutput::Replay(runs) => {
                    let csv = coverage_csv(&runs);
                    write_artifact(&out("coverage.csv"), &csv)?;
                    write!(stdout, "{csv}")?;
                }
            }
        }
        Command::Fuse { config } => {
            let cfg: FusionStudyConfig = read_json(&config)?;
            let report = run_fusion_study(&cfg)?;
            report.write_to(&g.out_dir)?;
            write!(stdout, "{}", report.summary_csv())?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.global.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
