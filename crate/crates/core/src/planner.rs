//! Per-cut latency model, calibration against measured per-cut times, and
//! optimal-cut selection.
//!
//! For a cut with `P` prefix GFLOPs, `S` suffix GFLOPs and an activation of
//! `bytes`, the predicted end-to-end frame time is
//!
//! ```text
//! T = preprocess + c_client·P + rtt_overhead + bytes/bandwidth + c_server·S + response_bytes/bandwidth
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{cut_payload_bytes, Cut, LayerGraph};
use crate::proto::RESPONSE_LEN;
use crate::stats::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    /// Seconds per GFLOP on the device.
    pub c_client: f64,
    /// Seconds per GFLOP on the server.
    pub c_server: f64,
    /// Uplink bytes per second; may be `f64::INFINITY`, written as `null` in JSON.
    #[serde(deserialize_with = "null_is_infinite")]
    pub bandwidth: f64,
    pub rtt_overhead: f64,
    pub preprocess: f64,
    pub response_bytes: f64,
}

fn null_is_infinite<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_client", self.c_client),
            ("c_server", self.c_server),
            ("rtt_overhead", self.rtt_overhead),
            ("preprocess", self.preprocess),
            ("response_bytes", self.response_bytes),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        Ok(())
    }

    /// Every time term multiplied by `factor` (bandwidth divided by it).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            c_client: self.c_client * factor,
            c_server: self.c_server * factor,
            bandwidth: self.bandwidth / factor,
            rtt_overhead: self.rtt_overhead * factor,
            preprocess: self.preprocess * factor,
            response_bytes: self.response_bytes,
        }
    }
}

pub fn predict_latency(graph: &LayerGraph, profile: &CostProfile, cut: Cut) -> Result<f64> {
    profile.validate()?;
    Ok(predict_unchecked(graph, profile, cut))
}

fn predict_unchecked(graph: &LayerGraph, p: &CostProfile, cut: Cut) -> f64 {
    let payload = cut_payload_bytes(graph, cut) as f64;
    p.preprocess
        + p.c_client * graph.prefix_gflops(cut)
        + p.rtt_overhead
        + payload / p.bandwidth
        + p.c_server * graph.suffix_gflops(cut)
        + p.response_bytes / p.bandwidth
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    /// Predicted seconds per cut, in cut order.
    pub predicted: Vec<(Cut, f64)>,
    pub best_cut: Cut,
    /// Ascending by prediction; ties keep cut order.
    pub ranking: Vec<Cut>,
}

pub fn plan(graph: &LayerGraph, profile: &CostProfile) -> Result<SplitPlan> {
    profile.validate()?;
    let predicted: Vec<(Cut, f64)> = Cut::all().map(|c| (c, predict_unchecked(graph, profile, c))).collect();
    let mut ranking: Vec<(Cut, f64)> = predicted.clone();
    // stable sort keeps the earlier cut on ties
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ranking: Vec<Cut> = ranking.into_iter().map(|(c, _)| c).collect();
    Ok(SplitPlan { best_cut: ranking[0], predicted, ranking })
}

impl SplitPlan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cut,predicted_s,rank\n");
        for (cut, t) in &self.predicted {
            let rank = self.ranking.iter().position(|c| c == cut).unwrap() + 1;
            let _ = writeln!(out, "{cut},{t:.9},{rank}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMeasurement {
    pub cut: Cut,
    pub mean_latency: f64,
    pub single_frame: Option<f64>,
}

/// Parses `cut,mean_latency_s[,single_frame_s]` lines (header optional).
pub fn parse_measurements_csv(text: &str) -> Result<Vec<CutMeasurement>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("cut,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Parse { line: i + 1, msg: format!("expected 2 or 3 fields, got {}", fields.len()) });
        }
        let cut = Cut::from_name(fields[0]).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|e| Error::Parse { line: i + 1, msg: format!("{s:?}: {e}") })?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parse { line: i + 1, msg: format!("latency must be positive, got {v}") });
            }
            Ok(v)
        };
        let mean_latency = num(fields[1])?;
        let single_frame = match fields.get(2) {
            Some(s) if !s.is_empty() => Some(num(s)?),
            _ => None,
        };
        out.push(CutMeasurement { cut, mean_latency, single_frame });
    }
    Ok(out)
}

pub fn measurements_to_csv(m: &[CutMeasurement]) -> String {
    let mut out = String::from("cut,mean_latency_s,single_frame_s\n");
    for row in m {
        match row.single_frame {
            Some(s) => {
                let _ = writeln!(out, "{},{:.9},{:.9}", row.cut, row.mean_latency, s);
            }
            None => {
                let _ = writeln!(out, "{},{:.9},", row.cut, row.mean_latency);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Server seconds per GFLOP held fixed during the fit. Per-cut totals
    /// only constrain `c_server·total_gflops + constant`, so the server rate
    /// has to come from outside; 0 folds all server compute into the constant.
    pub server_rate: f64,
    /// Fit single-frame rows alongside the mean rows. Off by default: the
    /// means are what the cost model predicts.
    pub include_single_frame: bool,
    /// Least-squares weight of single-frame rows relative to mean rows.
    pub single_frame_weight: f64,
    pub response_bytes: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            server_rate: 0.0,
            include_single_frame: false,
            single_frame_weight: 0.25,
            response_bytes: RESPONSE_LEN as f64,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub profile: CostProfile,
    /// Fitted `rtt_overhead + preprocess`; stored in the profile as
    /// `rtt_overhead` with `preprocess = 0`.
    pub combined_constant_s: f64,
    /// `(cut, predicted − measured mean)` per measured cut.
    pub residuals: Vec<(String, f64)>,
    pub residual_norm: f64,
    pub spearman_rho: f64,
    pub iterations: usize,
    pub best_cut: String,
    pub notes: Vec<String>,
}

pub fn calibrate(graph: &LayerGraph, measurements: &[CutMeasurement]) -> Result<Calibration> {
    calibrate_with(graph, measurements, &CalibrationOptions::default())
}

/// Fits `(constant, c_client, 1/bandwidth) >= 0` by non-negative least squares
/// on `T − server_rate·S = constant + c_client·P + (bytes + response)/bandwidth`.
pub fn calibrate_with(
    graph: &LayerGraph,
    measurements: &[CutMeasurement],
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    let mut distinct: Vec<Cut> = measurements.iter().map(|m| m.cut).collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 5 {
        return Err(Error::InsufficientData(format!("{} distinct cuts measured, need at least 5", distinct.len())));
    }
    if !(opts.server_rate >= 0.0) || !(opts.single_frame_weight >= 0.0) {
        return Err(Error::InvalidArgument("server_rate and single_frame_weight must be >= 0".into()));
    }

    let mut rows: Vec<([f64; 3], f64, f64)> = Vec::new();
    for m in measurements {
        let feat = [1.0, graph.prefix_gflops(m.cut), cut_payload_bytes(graph, m.cut) as f64 + opts.response_bytes];
        let offset = opts.server_rate * graph.suffix_gflops(m.cut);
        rows.push((feat, m.mean_latency - offset, 1.0));
        if let Some(s) = m.single_frame {
            if opts.include_single_frame && opts.single_frame_weight > 0.0 {
                rows.push((feat, s - offset, opts.single_frame_weight));
            }
        }
    }
    let a = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].0[j] * rows[i].2.sqrt());
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1 * r.2.sqrt()));

    let (x, iterations) = nnls(&a, &b, opts.max_iterations)?;
    let (constant, c_client, inv_bw) = (x[0], x[1], x[2]);
    let profile = CostProfile {
        c_client,
        c_server: opts.server_rate,
        bandwidth: if inv_bw > 0.0 { 1.0 / inv_bw } else { f64::INFINITY },
        rtt_overhead: constant,
        preprocess: 0.0,
        response_bytes: opts.response_bytes,
    };

    let mut residuals = Vec::new();
    let (mut predicted, mut measured) = (Vec::new(), Vec::new());
    for m in measurements {
        let p = predict_unchecked(graph, &profile, m.cut);
        residuals.push((m.cut.name().to_string(), p - m.mean_latency));
        predicted.push(p);
        measured.push(m.mean_latency);
    }
    let residual_norm = residuals.iter().map(|(_, r)| r * r).sum::<f64>().sqrt();
    let best = plan(graph, &profile)?.best_cut;
    let notes = vec![
        "rtt_overhead and preprocess are not separately identifiable; their sum is fitted as one constant".to_string(),
        format!(
            "server rate held at {} s/GFLOP; server compute is otherwise absorbed by the constant",
            opts.server_rate
        ),
    ];
    Ok(Calibration {
        profile,
        combined_constant_s: constant,
        residuals,
        residual_norm,
        spearman_rho: spearman(&predicted, &measured),
        iterations,
        best_cut: best.name().to_string(),
        notes,
    })
}

/// Lawson–Hanson active-set non-negative least squares, `min ‖Ax − b‖, x >= 0`.
/// Columns are scaled to unit max-norm internally. Returns the solution and
/// the number of inner iterations.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> Result<(DVector<f64>, usize)> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 || b.len() != m {
        return Err(Error::InvalidArgument(format!("nnls dimensions {m}x{n} vs rhs {}", b.len())));
    }
    let scale: Vec<f64> = (0..n).map(|j| a.column(j).amax()).collect();
    if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::DegenerateFit("design matrix has a zero or non-finite column".into()));
    }
    let a = DMatrix::from_fn(m, n, |i, j| a[(i, j)] / scale[j]);
    let sv = a.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if m < n || smin <= smax * 1e-10 {
        return Err(Error::DegenerateFit(format!("design matrix is rank deficient (singular values {sv:?})")));
    }

    let tol = 10.0 * f64::EPSILON * a.norm() * m.max(n) as f64;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;

    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(m, cols.len(), |i, k| a[(i, cols[k])]);
        let sol = sub.svd(true, true).solve(b, 1e-14).expect("svd with both factors");
        let mut z = DVector::zeros(n);
        for (k, &j) in cols.iter().enumerate() {
            z[j] = sol[k];
        }
        z
    };

    loop {
        let w = a.transpose() * (b - &a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::DegenerateFit(format!("nnls did not converge in {max_iter} iterations")));
            }
            let z = solve_passive(&passive);
            if (0..n).filter(|&k| passive[k]).all(|k| z[k] > tol) {
                x = z;
                break;
            }
            let alpha = (0..n)
                .filter(|&k| passive[k] && z[k] <= tol)
                .map(|k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x += (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    for (j, s) in scale.iter().enumerate() {
        x[j] /= s;
    }
    Ok((x, iterations))
}

/// Measured per-cut latencies of a reference device and server deployment
/// (mean over 100 frames, single frame), in cut order.
pub const REFERENCE_MEASUREMENTS: [(&str, f64, f64); 11] = [
    ("null", 0.4710, 0.5612),
    ("conv1", 1.0022, 1.2357),
    ("bn1", 1.0804, 1.1516),
    ("relu", 1.0672, 1.5340),
    ("maxpool", 0.6140, 0.6589),
    ("layer1", 0.7287, 0.8266),
    ("layer2", 0.7480, 0.7595),
    ("layer3", 1.0426, 0.8537),
    ("layer4", 1.1310, 0.9657),
    ("avgpool", 1.1010, 0.8700),
    ("fc", 1.1099, 0.8609),
];

pub fn reference_measurements(include_single_frame: bool) -> Vec<CutMeasurement> {
    REFERENCE_MEASUREMENTS
        .iter()
        .map(|(name, mean, single)| CutMeasurement {
            cut: Cut::from_name(name).unwrap(),
            mean_latency: *mean,
            single_frame: include_single_frame.then_some(*single),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_bandwidth_survives_json() {
        let p = CostProfile {
            c_client: 0.1,
            c_server: 0.0,
            bandwidth: f64::INFINITY,
            rtt_overhead: 0.0,
            preprocess: 0.0,
            response_bytes: 56.0,
        };
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"bandwidth\":null"));
        assert_eq!(serde_json::from_str::<CostProfile>(&text).unwrap(), p);
    }
    use crate::graph::build_backbone;

    fn example_profile() -> CostProfile {
        CostProfile {
            c_client: 0.25,
            c_server: 0.02,
            bandwidth: 1e7,
            rtt_overhead: 0.005,
            preprocess: 0.01,
            response_bytes: 56.0,
        }
    }

    fn g224() -> LayerGraph {
        build_backbone(224, 2048).unwrap()
    }

    #[test]
    fn predict_null_example() {
        let g = g224();
        let t = predict_latency(&g, &example_profile(), Cut::NULL).unwrap();
        // 0.01 + 0.005 + 602112/1e7 + 0.02·7.342872576 + 56/1e7
        let hand = 0.01 + 0.005 + 0.060_211_2 + 0.02 * 7.342_872_576 + 0.000_005_6;
        assert!((t - hand).abs() < 1e-12, "{t} vs {hand}");
        assert!((t - 0.2213).abs() < 0.002);
        let conv1 = predict_latency(&g, &example_profile(), Cut::from_name("conv1").unwrap()).unwrap();
        assert!(conv1 > t);
    }

    #[test]
    fn infinite_bandwidth_prefers_earlier_cuts() {
        let g = g224();
        let p = CostProfile { bandwidth: f64::INFINITY, rtt_overhead: 0.0, ..example_profile() };
        let t: Vec<f64> = Cut::all().map(|c| predict_latency(&g, &p, c).unwrap()).collect();
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plan_examples() {
        let g = g224();
        assert_eq!(plan(&g, &example_profile()).unwrap().best_cut, Cut::NULL);

        // Equal compute rates and a 1 kB/s link: the smallest late tensor
        // (avgpool, 512 floats) wins over fc's 2048 floats.
        let slow = CostProfile { c_server: 0.25, bandwidth: 1e3, ..example_profile() };
        let p = plan(&g, &slow).unwrap();
        assert_eq!(p.best_cut.name(), "avgpool");
        assert_eq!(p.ranking[1].name(), "fc");

        let free = CostProfile { bandwidth: f64::INFINITY, rtt_overhead: 0.0, c_server: 0.0, ..example_profile() };
        assert_eq!(plan(&g, &free).unwrap().best_cut, Cut::NULL);
    }

    #[test]
    fn plan_ties_break_by_cut_order() {
        let g = build_backbone(56, 64).unwrap();
        let zero = CostProfile {
            c_client: 0.0,
            c_server: 0.0,
            bandwidth: f64::INFINITY,
            rtt_overhead: 0.0,
            preprocess: 0.0,
            response_bytes: 0.0,
        };
        let p = plan(&g, &zero).unwrap();
        assert_eq!(p.ranking, Cut::all().collect::<Vec<_>>());
    }

    #[test]
    fn invalid_profile_rejected() {
        let g = g224();
        let bad = CostProfile { bandwidth: 0.0, ..example_profile() };
        assert!(predict_latency(&g, &bad, Cut::NULL).is_err());
        let bad = CostProfile { c_client: -1.0, ..example_profile() };
        assert!(plan(&g, &bad).is_err());
    }

    #[test]
    fn measurement_csv_roundtrip_and_errors() {
        let m = reference_measurements(true);
        assert_eq!(parse_measurements_csv(&measurements_to_csv(&m)).unwrap(), m);
        assert!(parse_measurements_csv("null,0.4\nbogus,1.0\n").is_err());
        assert!(parse_measurements_csv("null,-1\n").is_err());
        let parsed = parse_measurements_csv("null,0.5\nconv1,1.0,\n").unwrap();
        assert_eq!(parsed[1].single_frame, None);
    }

    #[test]
    fn single_frame_rows_are_opt_in() {
        let g = g224();
        let means = calibrate(&g, &reference_measurements(false)).unwrap();
        let both = reference_measurements(true);
        assert_eq!(calibrate(&g, &both).unwrap().profile, means.profile);
        let opts = CalibrationOptions { include_single_frame: true, ..Default::default() };
        let weighted = calibrate_with(&g, &both, &opts).unwrap();
        assert_ne!(weighted.profile, means.profile);
        let zero = CalibrationOptions { single_frame_weight: 0.0, ..opts };
        assert_eq!(calibrate_with(&g, &both, &zero).unwrap().profile, means.profile);
    }

    #[test]
    fn insufficient_cuts() {
        let g = g224();
        let m: Vec<_> = reference_measurements(false).into_iter().take(4).collect();
        assert!(matches!(calibrate(&g, &m), Err(Error::InsufficientData(_))));
        let mut dup = m.clone();
        dup.extend(m.iter().copied());
        assert!(matches!(calibrate(&g, &dup), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn degenerate_design_detected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(nnls(&a, &b, 100), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn nnls_clamps_negative_direction() {
        // Unconstrained optimum has x1 < 0; with x1 = 0 the best x0 is 0.5.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let (x, _) = nnls(&a, &b, 100).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1] == 0.0, "{x}");
    }
}
