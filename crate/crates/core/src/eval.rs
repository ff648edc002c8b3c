//! Inference over a frame sequence and trajectory reporting: CSV tables, SVG
//! plots and a latency summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fastdet::FastConfig;
use crate::geom::{self, DeltaPose, GeomError, PlanarState, PoseMatrix};
use crate::ingest::{NormStats, Raster};
use crate::net::{ModelGraph, NetError, Variant};
use crate::nncore::{Checkpoint, Tensor};
use crate::train::{self, LossLog, TrainError};

/// Per-pair time reported for the original implementation on its GPU. It is
/// written into latency reports for comparison only.
pub const REFERENCE_LATENCY_MS: f64 = 9.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("channel mismatch: network expects {expected} channels, frames give {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("checkpoint lacks normalization statistics ({0})")]
    CheckpointMissingStats(String),
    #[error("length mismatch: {pred} predicted deltas for {gt} ground-truth poses")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("pretrained-head checkpoints take activations, not frames")]
    NotAnImageModel,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A trained network with the preprocessing recorded in its checkpoint.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub graph: ModelGraph<f32>,
    pub norm: NormStats,
    pub input_size: usize,
    pub fast: Option<FastConfig>,
    pub id: String,
}

impl InferenceModel {
    pub fn from_checkpoint(ck: &Checkpoint, id: impl Into<String>) -> Result<Self> {
        let graph = ModelGraph::from_checkpoint(ck)?;
        if graph.config().variant == Variant::PretrainedHead {
            return Err(EvalError::NotAnImageModel);
        }
        let norm = train::norm_from_meta(ck)
            .map_err(|e| EvalError::CheckpointMissingStats(e.to_string()))?;
        if norm.channels() != graph.config().input_channels {
            return Err(EvalError::CheckpointMissingStats(format!(
                "{} normalization channels for a {}-channel network",
                norm.channels(),
                graph.config().input_channels
            )));
        }
        let input_size = ck
            .meta("data.input_size")
            .and_then(|v| v.parse().ok())
            .unwrap_or(graph.config().input_size);
        let fast = if graph.config().variant == Variant::TwoStreamRgbFast {
            let d = FastConfig::default();
            let get = |k: &str| ck.meta(k).and_then(|v| v.parse::<usize>().ok());
            Some(FastConfig {
                threshold: get("data.fast_threshold").map_or(d.threshold, |v| v as u8),
                arc_length: get("data.fast_arc").unwrap_or(d.arc_length),
                nms: ck.meta("data.fast_nms").map_or(d.nms, |v| v == "true"),
            })
        } else {
            None
        };
        Ok(Self {
            graph,
            norm,
            input_size,
            fast,
            id: id.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path).map_err(|e| EvalError::Net(e.into()))?;
        let id = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_checkpoint(&ck, id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub pairs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pick = |q: f64| {
            sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)]
        };
        Some(Self {
            pairs: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pick(0.5),
            p95_ms: pick(0.95),
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "pairs: {}\nmean_ms: {:.3}\np50_ms: {:.3}\np95_ms: {:.3}\nreference_ms: {REFERENCE_LATENCY_MS} \
             (published per-pair figure on different hardware; for comparison, not a target)\n",
            self.pairs, self.mean_ms, self.p50_ms, self.p95_ms
        )
    }
}

/// Motion predictions for consecutive frame pairs plus forward-pass latency
/// (milliseconds) of each pair.
pub fn infer_sequence(
    model: &mut InferenceModel,
    frames: &[Raster],
) -> Result<(Vec<DeltaPose>, Vec<f64>)> {
    if frames.len() < 2 {
        return Err(EvalError::TooShort(frames.len()));
    }
    let expected = model.graph.config().input_channels;
    let got = frames[0].channels + model.fast.is_some() as usize;
    if got != expected {
        return Err(EvalError::ChannelMismatch { expected, got });
    }
    let size = model.input_size;
    let prepared = frames
        .iter()
        .map(|f| train::prepare_frame(f, size, model.fast.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let per = expected * size * size;
    let inputs: Vec<Tensor<f32>> = prepared
        .iter()
        .map(|r| {
            let mut buf = vec![0f32; per];
            r.write_normalized_chw(&model.norm, &mut buf);
            Tensor::from_vec(&[1, expected, size, size], buf).expect("prepared frame size")
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut deltas = Vec::with_capacity(frames.len() - 1);
    let mut latency = Vec::with_capacity(frames.len() - 1);
    for w in inputs.windows(2) {
        let t0 = Instant::now();
        let out = model.graph.forward(&w[0], &w[1], false, &mut rng)?;
        latency.push(t0.elapsed().as_secs_f64() * 1e3);
        let d = out.data();
        deltas.push(DeltaPose::new(d[0] as f64, d[1] as f64, d[2] as f64));
    }
    model.graph.clear_cache();
    Ok((deltas, latency))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    pub predicted: Vec<PlanarState>,
    pub ground_truth: Vec<PlanarState>,
    pub deviation: Vec<f64>,
    pub latency: Option<LatencyStats>,
    pub checkpoint_id: String,
    pub sequence_id: String,
}

impl TrajectoryReport {
    /// Integrates predicted and ground-truth deltas from the same origin.
    pub fn build(pred: &[DeltaPose], gt_poses: &[PoseMatrix]) -> Result<Self> {
        if pred.len() + 1 != gt_poses.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                gt: gt_poses.len(),
            });
        }
        let gt_deltas = geom::decompose_trajectory(gt_poses)?;
        let predicted = geom::integrate_trajectory(PlanarState::origin(), pred);
        let ground_truth = geom::integrate_trajectory(PlanarState::origin(), &gt_deltas);
        let deviation = geom::deviation_curve(&predicted, &ground_truth)?;
        Ok(Self {
            predicted,
            ground_truth,
            deviation,
            latency: None,
            checkpoint_id: String::new(),
            sequence_id: String::new(),
        })
    }

    pub fn terminal_deviation(&self) -> f64 {
        self.deviation.last().copied().unwrap_or(0.0)
    }

    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("t,gt_x,gt_z,gt_theta,pred_x,pred_z,pred_theta\n");
        for (t, (g, p)) in self.ground_truth.iter().zip(&self.predicted).enumerate() {
            writeln!(
                s,
                "{t},{},{},{},{},{},{}",
                g.x, g.z, g.theta, p.x, p.z, p.theta
            )
            .unwrap();
        }
        s
    }

    pub fn deviation_csv(&self) -> String {
        let mut s = String::from("t,deviation\n");
        for (t, d) in self.deviation.iter().enumerate() {
            writeln!(s, "{t},{d}").unwrap();
        }
        s
    }

    pub fn trajectory_svg(&self) -> String {
        let gt: Vec<(f64, f64)> = self.ground_truth.iter().map(|s| (s.x, s.z)).collect();
        let pred: Vec<(f64, f64)> = self.predicted.iter().map(|s| (s.x, s.z)).collect();
        svg_plot(
            "Trajectory (top view)",
            "x [m]",
            "z [m]",
            &[
                ("ground truth", "#1f77b4", &gt),
                ("predicted", "#d62728", &pred),
            ],
            true,
        )
    }

    pub fn deviation_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .deviation
            .iter()
            .enumerate()
            .map(|(t, &d)| (t as f64, d))
            .collect();
        svg_plot(
            "Deviation from ground truth",
            "frame",
            "deviation [m]",
            &[("deviation", "#2ca02c", &pts)],
            false,
        )
    }

    /// Writes `trajectory.csv`, `deviation.csv`, `trajectory.svg`,
    /// `deviation.svg`, `latency.txt` and, given a loss log, `loss.csv` and
    /// `loss.svg`.
    pub fn write(&self, out_dir: &Path, loss: Option<&LossLog>) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let put = |name: &str, body: String| -> Result<()> {
            let p = out_dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        put("trajectory.csv", self.trajectory_csv())?;
        put("deviation.csv", self.deviation_csv())?;
        put("trajectory.svg", self.trajectory_svg())?;
        put("deviation.svg", self.deviation_svg())?;
        let mut lat = format!(
            "checkpoint: {}\nsequence: {}\n",
            self.checkpoint_id, self.sequence_id
        );
        match &self.latency {
            Some(l) => lat.push_str(&l.to_text()),
            None => lat.push_str(&format!(
                "pairs: 0\nreference_ms: {REFERENCE_LATENCY_MS} (no inference timed in this report)\n"
            )),
        }
        put("latency.txt", lat)?;
        if let Some(log) = loss {
            let mut buf = Vec::new();
            log.write_csv(&mut buf).expect("write to memory");
            put("loss.csv", String::from_utf8(buf).expect("ascii csv"))?;
            put("loss.svg", loss_svg(log))?;
        }
        Ok(())
    }
}

/// Builds the report, attaches latency and writes all files to `out_dir`.
pub fn report(
    pred: &[DeltaPose],
    gt_poses: &[PoseMatrix],
    latency_ms: &[f64],
    loss: Option<&LossLog>,
    out_dir: &Path,
) -> Result<TrajectoryReport> {
    let mut r = TrajectoryReport::build(pred, gt_poses)?;
    r.latency = LatencyStats::from_samples(latency_ms);
    r.write(out_dir, loss)?;
    Ok(r)
}

pub fn loss_svg(log: &LossLog) -> String {
    let train: Vec<(f64, f64)> = log
        .entries
        .iter()
        .map(|e| (e.iter as f64, e.train_loss))
        .collect();
    let test: Vec<(f64, f64)> = log
        .test_curve()
        .into_iter()
        .map(|(i, t)| (i as f64, t))
        .collect();
    svg_plot(
        "Training and test loss",
        "iteration",
        "loss",
        &[("train", "#1f77b4", &train), ("test", "#ff7f0e", &test)],
        false,
    )
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// Line plot whose polylines carry the raw data coordinates; a group
/// transform maps them into the viewport.
fn svg_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, &str, &[(f64, f64)])],
    equal_axes: bool,
) -> String {
    let all = series.iter().flat_map(|(_, _, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let (mut sx, mut sy) = (pw / (x1 - x0), ph / (y1 - y0));
    if equal_axes {
        let s = sx.min(sy);
        sx = s;
        sy = s;
    }
    // Data (x, y) lands at (MARGIN + (x - x0) sx, SVG_H - MARGIN - (y - y0) sy).
    let tx = MARGIN - x0 * sx;
    let ty = SVG_H - MARGIN + y0 * sy;
    let mut s = String::new();
    writeln!(
        s,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">
<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>
<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>
<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="10">{}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"##,
        SVG_W / 2.0,
        escape(title),
        SVG_W / 2.0,
        SVG_H - 12.0,
        escape(xlabel),
        SVG_H / 2.0,
        SVG_H / 2.0,
        escape(ylabel),
        SVG_H - MARGIN + 14.0,
        fmt_tick(x0),
        SVG_W - MARGIN,
        SVG_H - MARGIN + 14.0,
        fmt_tick(x0 + pw / sx),
        MARGIN - 4.0,
        SVG_H - MARGIN,
        fmt_tick(y0),
        MARGIN - 4.0,
        MARGIN + 4.0,
        fmt_tick(y0 + ph / sy),
    )
    .unwrap();
    writeln!(s, r#"<g transform="matrix({sx} 0 0 {} {tx} {ty})">"#, -sy).unwrap();
    for (name, color, pts) in series {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x},{y}")).collect();
        writeln!(
            s,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" vector-effect="non-scaling-stroke" points="{}"/>"#,
            escape(name),
            coords.join(" ")
        )
        .unwrap();
    }
    s.push_str("</g>\n");
    for (i, (name, color, _)) in series.iter().enumerate() {
        let y = MARGIN + 16.0 + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            MARGIN + 10.0,
            y - 4.0,
            MARGIN + 30.0,
            y - 4.0,
            MARGIN + 36.0,
            y,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
