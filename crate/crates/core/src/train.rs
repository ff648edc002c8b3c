//! Training loop, experiment presets and loss logging.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fastdet::{self, FastConfig, FastError};
use crate::geom::{DeltaPose, PoseMatrix};
use crate::ingest::{self, IngestError, NormStats, Raster, Sample, SplitSpec};
use crate::net::{ModelGraph, NetConfig, NetError, Variant};
use crate::nncore::{euclidean_loss, sgd_step, Checkpoint, NnError, SgdConfig, SgdState, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split left the {0} side empty")]
    EmptySplit(&'static str),
    #[error("no samples to evaluate")]
    EmptySet,
    #[error("loss became non-finite at iteration {iteration}")]
    DivergedLoss {
        iteration: u64,
        last_good: Option<PathBuf>,
    },
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("checkpoint lacks {0}")]
    CheckpointMissing(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Fast(#[from] FastError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    UnknownEnv,
    KnownEnv80,
    KnownEnv50,
    FastPrior,
    PretrainedHead,
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PresetName::UnknownEnv => "unknown-env",
            PresetName::KnownEnv80 => "known-env-80",
            PresetName::KnownEnv50 => "known-env-50",
            PresetName::FastPrior => "fast-prior",
            PresetName::PretrainedHead => "pretrained-head",
        })
    }
}

impl FromStr for PresetName {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unknown-env" => PresetName::UnknownEnv,
            "known-env-80" => PresetName::KnownEnv80,
            "known-env-50" => PresetName::KnownEnv50,
            "fast-prior" => PresetName::FastPrior,
            "pretrained-head" => PresetName::PretrainedHead,
            _ => return Err(TrainError::InvalidPreset(format!("unknown preset {s:?}"))),
        })
    }
}

/// Everything that defines one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub split: SplitSpec,
    pub net: NetConfig,
    pub iterations: u64,
    /// Full test-set evaluation every this many iterations.
    pub test_interval: u64,
    /// Periodic checkpoint every this many iterations (0 disables).
    pub checkpoint_interval: u64,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Corner detector settings for the 4-channel variant.
    pub fast: FastConfig,
}

impl ExperimentPreset {
    /// Desk-scale defaults: 2000 iterations, test every 100, batch 16.
    pub fn new(name: PresetName, width: f64) -> Self {
        let (split, net) = match name {
            PresetName::UnknownEnv => (SplitSpec::default_holdout(), NetConfig::two_stream(width)),
            PresetName::KnownEnv80 => (SplitSpec::random(0.8, 0), NetConfig::two_stream(width)),
            PresetName::KnownEnv50 => (SplitSpec::random(0.5, 0), NetConfig::two_stream(width)),
            PresetName::FastPrior => (
                SplitSpec::default_holdout(),
                NetConfig::two_stream_fast(width),
            ),
            PresetName::PretrainedHead => (
                SplitSpec::default_holdout(),
                NetConfig::pretrained_head(width),
            ),
        };
        Self {
            name,
            split,
            net,
            iterations: 2000,
            test_interval: 100,
            checkpoint_interval: 1000,
            batch_size: 16,
            sgd: SgdConfig::default(),
            fast: FastConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidPreset(m));
        self.net.validate()?;
        self.sgd.validate()?;
        let want = match self.name {
            PresetName::FastPrior => Variant::TwoStreamRgbFast,
            PresetName::PretrainedHead => Variant::PretrainedHead,
            _ => Variant::TwoStreamRgb,
        };
        if self.net.variant != want {
            return bad(format!(
                "preset {} needs variant {want}, got {}",
                self.name, self.net.variant
            ));
        }
        match (self.name, &self.split) {
            (
                PresetName::KnownEnv80 | PresetName::KnownEnv50,
                SplitSpec::SequenceHoldout { .. },
            ) => {
                return bad(format!(
                    "preset {} needs a within-sequence split",
                    self.name
                ))
            }
            (
                PresetName::UnknownEnv | PresetName::FastPrior | PresetName::PretrainedHead,
                SplitSpec::WithinSequenceRandom { .. },
            ) => {
                return bad(format!(
                    "preset {} needs a sequence holdout split",
                    self.name
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 || self.test_interval == 0 {
            return bad("batch size and test interval must be positive".into());
        }
        Ok(())
    }
}

/// One row of the loss log. `train_loss` is the minibatch loss (dropout on)
/// at that iteration, before its update; the last row holds full-set losses
/// of the final weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub iter: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<LossEntry>,
}

impl LossLog {
    pub fn push(&mut self, e: LossEntry) {
        debug_assert!(self.entries.last().is_none_or(|l| l.iter < e.iter));
        self.entries.push(e);
    }

    /// `(iter, test_loss)` for the rows that have one.
    pub fn test_curve(&self) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.test_loss.map(|t| (e.iter, t)))
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iter,train_loss,test_loss")?;
        for e in &self.entries {
            match e.test_loss {
                Some(t) => writeln!(w, "{},{:e},{:e}", e.iter, e.train_loss, t)?,
                None => writeln!(w, "{},{:e},", e.iter, e.train_loss)?,
            }
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let bad = |line: &str| TrainError::InvalidPreset(format!("bad loss log line {line:?}"));
        let mut log = LossLog::default();
        for line in r.lines().skip(1) {
            let line = line.map_err(io_err(Path::new("loss log")))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(&line));
            }
            log.entries.push(LossEntry {
                iter: f[0].parse().map_err(|_| bad(&line))?,
                train_loss: f[1].parse().map_err(|_| bad(&line))?,
                test_loss: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad(&line))?)
                },
            });
        }
        Ok(log)
    }
}

/// A labelled pair of network inputs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Per-input `(C, H, W)`.
    fn input_shape(&self) -> [usize; 3];
    /// Writes both inputs of pair `idx` as CHW floats.
    fn fill(&self, idx: usize, a: &mut [f32], b: &mut [f32]);
    fn label(&self, idx: usize) -> DeltaPose;
}

/// Image pairs normalized with fixed statistics.
#[derive(Debug, Clone)]
pub struct ImagePairs<'a> {
    pub samples: &'a [Sample],
    pub norm: &'a NormStats,
}

impl PairSource for ImagePairs<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn input_shape(&self) -> [usize; 3] {
        let s = &self.samples[0].img_a;
        [s.channels, s.height, s.width]
    }
    fn fill(&self, idx: usize, a: &mut [f32], b: &mut [f32]) {
        let s = &self.samples[idx];
        s.img_a.write_normalized_chw(self.norm, a);
        s.img_b.write_normalized_chw(self.norm, b);
    }
    fn label(&self, idx: usize) -> DeltaPose {
        self.samples[idx].label
    }
}

/// Externally computed activation tensors for consecutive frames.
#[derive(Debug, Clone)]
pub struct ActivationSample {
    pub act_a: Arc<Tensor<f32>>,
    pub act_b: Arc<Tensor<f32>>,
    pub label: DeltaPose,
    pub seq_id: String,
    pub frame_idx: usize,
}

#[derive(Debug, Clone)]
pub struct ActivationPairs<'a> {
    pub samples: &'a [ActivationSample],
}

impl PairSource for ActivationPairs<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn input_shape(&self) -> [usize; 3] {
        let s = self.samples[0].act_a.shape();
        [s[0], s[1], s[2]]
    }
    fn fill(&self, idx: usize, a: &mut [f32], b: &mut [f32]) {
        let s = &self.samples[idx];
        a.copy_from_slice(s.act_a.data());
        b.copy_from_slice(s.act_b.data());
    }
    fn label(&self, idx: usize) -> DeltaPose {
        self.samples[idx].label
    }
}

/// Reads a `DVOC` file holding one `(C, H, W)` tensor per frame, named by
/// frame index, and pairs consecutive frames with their pose deltas.
pub fn load_activation_pairs(
    path: &Path,
    poses: &[PoseMatrix],
    seq_id: &str,
) -> Result<Vec<ActivationSample>> {
    let ck = Checkpoint::load(path)?;
    let mut acts = Vec::with_capacity(poses.len());
    for i in 0..poses.len() {
        let t = ck
            .get(&format!("{i:06}"))
            .or_else(|| ck.get(&i.to_string()))
            .ok_or_else(|| {
                TrainError::CheckpointMissing(format!(
                    "activation for frame {i} in {}",
                    path.display()
                ))
            })?;
        if t.rank() != 3 {
            return Err(NetError::ShapeMismatch(format!(
                "activation {i} has shape {:?}",
                t.shape()
            ))
            .into());
        }
        acts.push(Arc::new(t.clone()));
    }
    if acts.len() < 2 {
        return Err(IngestError::TooShort(acts.len()).into());
    }
    Ok(poses
        .windows(2)
        .enumerate()
        .map(|(i, w)| ActivationSample {
            act_a: acts[i].clone(),
            act_b: acts[i + 1].clone(),
            label: crate::geom::relative_delta(&w[0], &w[1]),
            seq_id: seq_id.to_string(),
            frame_idx: i,
        })
        .collect())
}

/// Resizes a frame to the network input edge. For the 4-channel variant the
/// FAST mask is detected at native resolution and resized with the image.
pub fn prepare_frame(img: &Raster, size: usize, fast: Option<&FastConfig>) -> Result<Raster> {
    let img = match fast {
        Some(cfg) => {
            let mask = fastdet::corner_mask_any(img, cfg)?;
            img.with_extra_channel(&mask)?
        }
        None => img.clone(),
    };
    Ok(if img.width == size && img.height == size {
        img
    } else {
        ingest::warp_resize(&img, size, size)?
    })
}

/// [`prepare_frame`] over samples, processing each shared frame once.
pub fn prepare_samples(
    samples: &[Sample],
    size: usize,
    fast: Option<&FastConfig>,
) -> Result<Vec<Sample>> {
    let mut done: HashMap<*const Raster, Arc<Raster>> = HashMap::new();
    let mut get = |img: &Arc<Raster>| -> Result<Arc<Raster>> {
        let key = Arc::as_ptr(img);
        if let Some(r) = done.get(&key) {
            return Ok(r.clone());
        }
        let r = Arc::new(prepare_frame(img, size, fast)?);
        done.insert(key, r.clone());
        Ok(r)
    };
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                img_a: get(&s.img_a)?,
                img_b: get(&s.img_b)?,
                label: s.label,
                seq_id: s.seq_id.clone(),
                frame_idx: s.frame_idx,
            })
        })
        .collect()
}

/// Assembles the batch for `indices` into `(a, b, labels)` tensors.
pub fn assemble_batch(
    src: &dyn PairSource,
    indices: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let [c, h, w] = src.input_shape();
    let per = c * h * w;
    let n = indices.len();
    let mut a = vec![0f32; n * per];
    let mut b = vec![0f32; n * per];
    let mut y = Vec::with_capacity(n * 3);
    for (k, &i) in indices.iter().enumerate() {
        src.fill(
            i,
            &mut a[k * per..(k + 1) * per],
            &mut b[k * per..(k + 1) * per],
        );
        y.extend(src.label(i).as_array().map(|v| v as f32));
    }
    Ok((
        Tensor::from_vec(&[n, c, h, w], a)?,
        Tensor::from_vec(&[n, c, h, w], b)?,
        Tensor::from_vec(&[n, 3], y)?,
    ))
}

/// Mean per-sample euclidean loss over `src` with dropout off.
pub fn evaluate_loss(
    g: &mut ModelGraph<f32>,
    src: &dyn PairSource,
    batch_size: usize,
) -> Result<f64> {
    if src.is_empty() {
        return Err(TrainError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (a, b, y) = assemble_batch(src, chunk)?;
        let pred = g.forward(&a, &b, false, &mut rng)?;
        let (loss, _) = euclidean_loss(&pred, &y)?;
        total += loss * chunk.len() as f64;
    }
    g.clear_cache();
    Ok(total / src.len() as f64)
}

/// Predictions for every pair in `src`, dropout off.
pub fn predict(
    g: &mut ModelGraph<f32>,
    src: &dyn PairSource,
    batch_size: usize,
) -> Result<Vec<DeltaPose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut out = Vec::with_capacity(src.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (a, b, _) = assemble_batch(src, chunk)?;
        let pred = g.forward(&a, &b, false, &mut rng)?;
        for p in pred.data().chunks_exact(3) {
            out.push(DeltaPose::new(p[0] as f64, p[1] as f64, p[2] as f64));
        }
    }
    g.clear_cache();
    Ok(out)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic minibatch order: each epoch is a seeded permutation, and the
/// batch for any iteration can be recomputed without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    batch: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch: usize) -> Self {
        Self {
            seed,
            n,
            batch,
            epoch: None,
        }
    }

    fn perm(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                self.seed, epoch, 1,
            )));
            self.epoch = Some((epoch, p));
        }
        &self.epoch.as_ref().unwrap().1
    }

    pub fn batch(&mut self, iteration: u64) -> Vec<usize> {
        let start = iteration * self.batch as u64;
        (0..self.batch as u64)
            .map(|j| {
                let pos = start + j;
                let n = self.n as u64;
                self.perm(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

/// Knobs that do not change what is being learned.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop once the full training-set loss (dropout off), checked at every
    /// test interval, falls below this value.
    pub stop_below: Option<f64>,
    /// Continue from a checkpoint written by this loop.
    pub resume: Option<Checkpoint>,
    /// Image edge the samples were prepared at (recorded for inference).
    pub input_size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    /// Iterations actually run (including resumed ones).
    pub iterations: u64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

fn norm_to_meta(ck: &mut Checkpoint, norm: &NormStats) {
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    ck.set_meta("norm.mean", join(&norm.mean));
    ck.set_meta("norm.std", join(&norm.std));
}

/// Normalization statistics stored in a checkpoint's metadata.
pub fn norm_from_meta(ck: &Checkpoint) -> Result<NormStats> {
    let parse = |key: &str| -> Result<Vec<f64>> {
        let v = ck
            .meta(key)
            .ok_or_else(|| TrainError::CheckpointMissing(key.into()))?;
        v.split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| TrainError::CheckpointMissing(format!("{key} (unparsable)")))
            })
            .collect()
    };
    Ok(NormStats {
        mean: parse("norm.mean")?,
        std: parse("norm.std")?,
    })
}

struct Session<'a> {
    preset: &'a ExperimentPreset,
    seed: u64,
    norm: Option<&'a NormStats>,
    input_size: Option<usize>,
}

impl Session<'_> {
    fn checkpoint(&self, g: &ModelGraph<f32>, state: &SgdState<f32>, iteration: u64) -> Checkpoint {
        let mut ck = g.to_checkpoint();
        for ((name, p), v) in g.params().into_iter().zip(&state.velocity) {
            ck.push(
                format!("sgd.velocity.{name}"),
                Tensor::from_vec(p.shape(), v.clone()).expect("velocity matches its parameter"),
            );
        }
        ck.set_meta("train.iteration", iteration);
        ck.set_meta("train.seed", self.seed);
        ck.set_meta("train.preset", self.preset.name);
        ck.set_meta("train.batch_size", self.preset.batch_size);
        if let Some(norm) = self.norm {
            norm_to_meta(&mut ck, norm);
        }
        if let Some(size) = self.input_size {
            ck.set_meta("data.input_size", size);
        }
        if self.preset.net.variant == Variant::TwoStreamRgbFast {
            ck.set_meta("data.fast_threshold", self.preset.fast.threshold);
            ck.set_meta("data.fast_arc", self.preset.fast.arc_length);
            ck.set_meta("data.fast_nms", self.preset.fast.nms);
        }
        ck
    }
}

/// Image experiment: splits `dataset` per the preset, computes normalization
/// on the training side, and runs [`train_pairs`].
pub fn train(
    preset: &ExperimentPreset,
    dataset: &[Sample],
    seed: u64,
    out_dir: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    preset.validate()?;
    let (train_s, test_s) = ingest::split(dataset, &preset.split).map_err(|e| match e {
        IngestError::EmptySide(side) => TrainError::EmptySplit(side),
        other => other.into(),
    })?;
    if train_s.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if test_s.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let norm = match opts.resume.as_ref().map(norm_from_meta) {
        Some(Ok(n)) => n,
        _ => ingest::compute_norm_stats(&train_s)?,
    };
    let train_src = ImagePairs {
        samples: &train_s,
        norm: &norm,
    };
    let test_src = ImagePairs {
        samples: &test_s,
        norm: &norm,
    };
    let session = Session {
        preset,
        seed,
        norm: Some(&norm),
        input_size: opts.input_size.or(Some(train_s[0].img_a.width)),
    };
    run(&session, &train_src, &test_src, out_dir, opts)
}

/// Trains on explicit train/test pair sources (used by the pretrained head
/// and by callers that split data themselves).
pub fn train_pairs(
    preset: &ExperimentPreset,
    train_src: &dyn PairSource,
    test_src: &dyn PairSource,
    norm: Option<&NormStats>,
    seed: u64,
    out_dir: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    preset.validate()?;
    let session = Session {
        preset,
        seed,
        norm,
        input_size: opts.input_size,
    };
    run(&session, train_src, test_src, out_dir, opts)
}

fn run(
    session: &Session,
    train_src: &dyn PairSource,
    test_src: &dyn PairSource,
    out_dir: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let preset = session.preset;
    let seed = session.seed;
    if train_src.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if test_src.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut g = ModelGraph::<f32>::build(&preset.net, seed)?;
    let mut state = SgdState::<f32>::default();
    let mut start = 0u64;
    if let Some(ck) = &opts.resume {
        g.load_params(ck)?;
        start = ck
            .meta("train.iteration")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::CheckpointMissing("train.iteration".into()))?;
        state.velocity = g
            .params()
            .iter()
            .map(|(name, p)| {
                ck.get(&format!("sgd.velocity.{name}"))
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect();
    }
    let mut sched = BatchSchedule::new(seed, train_src.len(), preset.batch_size);
    let mut log = LossLog::default();
    let mut last_good: Option<PathBuf> = None;
    let eval_bs = preset.batch_size.max(16);
    let mut iter = start;
    while iter < preset.iterations {
        let test_loss = if iter % preset.test_interval == 0 {
            let t = evaluate_loss(&mut g, test_src, eval_bs)?;
            if let Some(target) = opts.stop_below {
                if evaluate_loss(&mut g, train_src, eval_bs)? < target {
                    break;
                }
            }
            Some(t)
        } else {
            None
        };
        let idx = sched.batch(iter);
        let (a, b, y) = assemble_batch(train_src, &idx)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iter, 2));
        g.zero_grad();
        let pred = g.forward(&a, &b, true, &mut drop_rng)?;
        let (loss, grad) = euclidean_loss(&pred, &y)?;
        if !loss.is_finite() {
            return Err(TrainError::DivergedLoss {
                iteration: iter,
                last_good,
            });
        }
        log.push(LossEntry {
            iter,
            train_loss: loss,
            test_loss,
        });
        if let Some(t) = test_loss {
            log::info!("iter {iter}: train {loss:.5} test {t:.5}");
        }
        g.backward(&grad)?;
        {
            let mut params: Vec<&mut Tensor<f32>> =
                g.params_mut().into_iter().map(|(_, p)| p).collect();
            sgd_step(&mut params, &mut state, &preset.sgd, iter)?;
        }
        iter += 1;
        if let Some(dir) = out_dir {
            if preset.checkpoint_interval > 0
                && iter % preset.checkpoint_interval == 0
                && iter < preset.iterations
            {
                let path = dir.join(format!("ckpt_{iter:06}.dvoc"));
                session.checkpoint(&g, &state, iter).save(&path)?;
                last_good = Some(path);
            }
        }
    }
    let final_train_loss = evaluate_loss(&mut g, train_src, eval_bs)?;
    let final_test_loss = evaluate_loss(&mut g, test_src, eval_bs)?;
    if !(final_train_loss.is_finite() && final_test_loss.is_finite()) {
        return Err(TrainError::DivergedLoss {
            iteration: iter,
            last_good,
        });
    }
    log.push(LossEntry {
        iter: iter.max(log.entries.last().map_or(0, |e| e.iter + 1)),
        train_loss: final_train_loss,
        test_loss: Some(final_test_loss),
    });
    let checkpoint = session.checkpoint(&g, &state, iter);
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join("final.dvoc"))?;
        let path = dir.join("loss.csv");
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        log.write_csv(std::io::BufWriter::new(f))
            .map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        iterations: iter,
        final_train_loss,
        final_test_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::StreamGeometry;

    #[test]
    fn batch_schedule_is_resumable() {
        let mut full = BatchSchedule::new(7, 10, 4);
        let all: Vec<Vec<usize>> = (0..9).map(|i| full.batch(i)).collect();
        let mut fresh = BatchSchedule::new(7, 10, 4);
        assert_eq!(fresh.batch(5), all[5]);
        // every epoch visits each sample once
        let flat: Vec<usize> = all.concat();
        let mut first: Vec<usize> = flat[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn preset_consistency() {
        for name in [
            PresetName::UnknownEnv,
            PresetName::KnownEnv80,
            PresetName::KnownEnv50,
            PresetName::FastPrior,
            PresetName::PretrainedHead,
        ] {
            let p = ExperimentPreset::new(name, 0.25);
            p.validate().unwrap();
            assert_eq!(name.to_string().parse::<PresetName>().unwrap(), name);
        }
        let mut p = ExperimentPreset::new(PresetName::FastPrior, 0.25);
        p.net = NetConfig::two_stream(0.25);
        assert!(p.validate().is_err());
        let mut p = ExperimentPreset::new(PresetName::KnownEnv80, 0.25);
        p.split = SplitSpec::default_holdout();
        assert!(p.validate().is_err());
    }

    #[test]
    fn loss_log_csv_round_trip() {
        let log = LossLog {
            entries: vec![
                LossEntry {
                    iter: 0,
                    train_loss: 1.5,
                    test_loss: Some(2.0),
                },
                LossEntry {
                    iter: 1,
                    train_loss: 0.25,
                    test_loss: None,
                },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,train_loss,test_loss\n"));
        assert_eq!(LossLog::read_csv(&buf[..]).unwrap(), log);
    }

    fn zero_head_graph() -> ModelGraph<f32> {
        let mut cfg = NetConfig::two_stream(0.125);
        cfg.geometry = StreamGeometry::TINY;
        cfg.input_size = 8;
        let mut g = ModelGraph::build(&cfg, 3).unwrap();
        for (name, p) in g.params_mut() {
            if name.starts_with("head.fc4") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        g
    }

    fn tiny_samples(n: usize, label: DeltaPose) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let img = Arc::new(
                    Raster::new(
                        8,
                        8,
                        3,
                        (0..192).map(|k| ((k * 13 + i * 7) % 256) as u8).collect(),
                    )
                    .unwrap(),
                );
                Sample {
                    img_a: img.clone(),
                    img_b: img,
                    label,
                    seq_id: "00".into(),
                    frame_idx: i,
                }
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut g = zero_head_graph();
        let samples = tiny_samples(5, DeltaPose::new(0.0, 0.0, 0.0));
        let norm = NormStats::identity(3);
        let src = ImagePairs {
            samples: &samples,
            norm: &norm,
        };
        assert_eq!(evaluate_loss(&mut g, &src, 2).unwrap(), 0.0);
        assert!(matches!(
            evaluate_loss(
                &mut g,
                &ImagePairs {
                    samples: &[],
                    norm: &norm
                },
                2
            ),
            Err(TrainError::EmptySet)
        ));
    }

    #[test]
    fn evaluation_is_batch_invariant() {
        let mut cfg = NetConfig::two_stream(0.125);
        cfg.geometry = StreamGeometry::TINY;
        cfg.input_size = 8;
        let mut g = ModelGraph::build(&cfg, 9).unwrap();
        let samples = tiny_samples(13, DeltaPose::new(0.1, 1.0, -0.02));
        let norm = NormStats::identity(3);
        let src = ImagePairs {
            samples: &samples,
            norm: &norm,
        };
        let one = evaluate_loss(&mut g, &src, 1).unwrap();
        let eight = evaluate_loss(&mut g, &src, 8).unwrap();
        assert!(
            (one - eight).abs() <= 1e-6 * one.max(1.0),
            "{one} vs {eight}"
        );
    }
}
