use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use deepvo::eval::{self, InferenceModel};
use deepvo::fastdet::{self, FastConfig};
use deepvo::ingest::{self, Sample, SplitSpec};
use deepvo::net::{ConvInit, StreamGeometry, Variant};
use deepvo::nncore::Checkpoint;
use deepvo::synthworld::{self, MotionScript, WorldConfig};
use deepvo::train::{self, ActivationPairs, ExperimentPreset, LossLog, PresetName, TrainOptions};

/// Index of sequence record files written by `preprocess`.
const DATASET_INDEX: &str = "dataset.txt";
/// Optional split override written by `preprocess --split`.
const SPLIT_FILE: &str = "split.txt";

#[derive(Parser)]
#[command(
    name = "deepvo",
    version,
    about = "Monocular visual odometry with a two-stream CNN"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resize sequences from a manifest and write sample records.
    Preprocess(PreprocessArgs),
    /// Render a synthetic sequence with exact poses.
    Synth(SynthArgs),
    /// Write the FAST corner mask of an image.
    Fast(FastArgs),
    /// Train an experiment preset on preprocessed records.
    Train(TrainArgs),
    /// Run a checkpoint over a sequence and write the trajectory report.
    Infer(InferArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKind {
    Holdout,
    Random,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Append the FAST corner mask as a fourth channel.
    #[arg(long)]
    fast_channel: bool,
    #[arg(long, value_enum)]
    split: Option<SplitKind>,
    /// Training fraction for the random split.
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated training sequences for the holdout split.
    #[arg(long)]
    train_seqs: Option<String>,
    /// Comma-separated test sequences for the holdout split.
    #[arg(long)]
    test_seqs: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// CSV of `speed,yaw_rate` rows, one per frame step.
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sequence id written to the manifest.
    #[arg(long, default_value = "00")]
    id: String,
}

#[derive(Args)]
struct FastArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    threshold: u8,
    #[arg(long, default_value_t = 9)]
    arc: usize,
    #[arg(long)]
    nms: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    preset: PresetName,
    /// Directory written by `preprocess`, or for the pretrained head a
    /// manifest whose image column names activation files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long)]
    iters: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// alexnet, compact or tiny; chosen from the input size when omitted.
    #[arg(long)]
    geometry: Option<String>,
    /// `fan-in` or a fixed standard deviation.
    #[arg(long)]
    conv_init: Option<ConvInit>,
    /// Scale applied to the output layer's initial weights.
    #[arg(long)]
    output_init_gain: Option<f64>,
    #[arg(long)]
    test_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Stop early once the full training-set loss falls below this value.
    #[arg(long)]
    stop_below: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of frames.
    #[arg(long)]
    seq: PathBuf,
    /// Ground-truth pose file for the same frames.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss log to copy into the report; defaults to `loss.csv` beside the checkpoint.
    #[arg(long)]
    loss: Option<PathBuf>,
}

/// World config file. Missing keys take the library defaults.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WorldFile {
    seed: u64,
    extent: f64,
    texture_cell: f64,
    camera_height: f64,
    focal: f64,
    image_size: usize,
    scale_factor: f64,
    region: u32,
}

impl Default for WorldFile {
    fn default() -> Self {
        let d = WorldConfig::default();
        Self {
            seed: d.seed,
            extent: d.extent,
            texture_cell: d.texture_cell,
            camera_height: d.camera_height,
            focal: d.focal,
            image_size: d.image_size,
            scale_factor: d.scale_factor,
            region: d.region,
        }
    }
}

impl From<WorldFile> for WorldConfig {
    fn from(w: WorldFile) -> Self {
        WorldConfig {
            seed: w.seed,
            extent: w.extent,
            texture_cell: w.texture_cell,
            camera_height: w.camera_height,
            focal: w.focal,
            image_size: w.image_size,
            scale_factor: w.scale_factor,
            region: w.region,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Preprocess(a) => preprocess(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Fast(a) => fast(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Infer(a) => infer(a),
    }
}

fn seq_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    if a.size == 0 {
        bail!("--size must be positive");
    }
    let entries = ingest::read_manifest(&a.manifest)?;
    if entries.is_empty() {
        bail!("manifest {} lists no sequences", a.manifest.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let fast = a.fast_channel.then(FastConfig::default);
    let mut index = String::new();
    for e in &entries {
        let frames = ingest::load_frames(&e.image_dir)?;
        let poses = ingest::load_poses(&e.pose_file)?;
        let prepared = frames
            .iter()
            .map(|f| train::prepare_frame(f, a.size, fast.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        let samples = ingest::build_pairs(&prepared, &poses, &e.seq_id)?;
        let file = format!("{}.dvos", e.seq_id);
        ingest::write_sequence_records(&a.out.join(&file), &samples)?;
        index.push_str(&format!("{} {}\n", e.seq_id, file));
        info!("{}: {} pairs", e.seq_id, samples.len());
    }
    fs::write(a.out.join(DATASET_INDEX), index)?;
    match a.split {
        Some(SplitKind::Random) => {
            if !(a.fraction > 0.0 && a.fraction < 1.0) {
                bail!("--fraction must lie in (0, 1)");
            }
            fs::write(
                a.out.join(SPLIT_FILE),
                format!("random {} {}\n", a.fraction, a.seed),
            )?;
        }
        Some(SplitKind::Holdout) => {
            let (tr, te) = match (&a.train_seqs, &a.test_seqs) {
                (Some(tr), Some(te)) => (seq_list(tr), seq_list(te)),
                (None, None) => match SplitSpec::default_holdout() {
                    SplitSpec::SequenceHoldout {
                        train_sequences,
                        test_sequences,
                    } => (train_sequences, test_sequences),
                    _ => unreachable!(),
                },
                _ => bail!("--train-seqs and --test-seqs go together"),
            };
            fs::write(
                a.out.join(SPLIT_FILE),
                format!("holdout {} {}\n", tr.join(","), te.join(",")),
            )?;
        }
        None => {}
    }
    Ok(())
}

fn read_split(path: &Path) -> Result<Option<SplitSpec>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let parts: Vec<&str> = text.split_whitespace().collect();
    Ok(Some(match parts.as_slice() {
        ["random", f, s] => SplitSpec::random(f.parse()?, s.parse()?),
        ["holdout", tr, te] => SplitSpec::SequenceHoldout {
            train_sequences: seq_list(tr),
            test_sequences: seq_list(te),
        },
        _ => bail!("{}: unrecognized split line", path.display()),
    }))
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = dir.join(DATASET_INDEX);
    let text =
        fs::read_to_string(&index).with_context(|| format!("reading {}", index.display()))?;
    let mut all = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Some((id, file)) = line.split_once(' ') else {
            bail!("{}: bad line {line:?}", index.display());
        };
        all.extend(ingest::read_sequence_records(&dir.join(file.trim()), id)?);
    }
    if all.is_empty() {
        bail!("{} holds no samples", dir.display());
    }
    Ok(all)
}

fn synth(a: SynthArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: WorldConfig = toml::from_str::<WorldFile>(&text)
        .with_context(|| format!("parsing {}", a.config.display()))?
        .into();
    let script_text =
        fs::read_to_string(&a.script).with_context(|| format!("reading {}", a.script.display()))?;
    let script = MotionScript::parse_csv(&script_text)?;
    let seq = synthworld::render_sequence(&cfg, &script)?;
    synthworld::write_corpus(&a.out, &[(a.id.clone(), seq)])?;
    info!(
        "wrote {} frames of sequence {} to {}",
        script.len() + 1,
        a.id,
        a.out.display()
    );
    Ok(())
}

fn fast(a: FastArgs) -> Result<()> {
    let cfg = FastConfig {
        threshold: a.threshold,
        arc_length: a.arc,
        nms: a.nms,
    };
    let img = ingest::load_raster(&a.input)?;
    let mask = fastdet::corner_mask_any(&img, &cfg)?;
    let n = mask.data.iter().filter(|&&v| v > 0).count();
    ingest::save_raster(&mask, &a.out)?;
    info!("{n} corners");
    Ok(())
}

fn apply_overrides(p: &mut ExperimentPreset, a: &TrainArgs) -> Result<()> {
    p.iterations = a.iters;
    if let Some(v) = a.lr {
        p.sgd.lr = v;
    }
    if let Some(v) = a.batch {
        p.batch_size = v;
    }
    if let Some(v) = a.dropout {
        p.net.dropout_p = v;
    }
    if let Some(v) = a.conv_init {
        p.net.conv_init = v;
    }
    if let Some(v) = a.output_init_gain {
        p.net.output_init_gain = v;
    }
    if let Some(v) = a.test_interval {
        p.test_interval = v;
    }
    if let Some(v) = a.checkpoint_interval {
        p.checkpoint_interval = v;
    }
    if let Some(g) = &a.geometry {
        p.net.geometry =
            StreamGeometry::by_name(g).with_context(|| format!("unknown geometry {g:?}"))?;
    }
    Ok(())
}

fn geometry_for(size: usize) -> Option<StreamGeometry> {
    match size {
        256 => Some(StreamGeometry::ALEXNET),
        64 => Some(StreamGeometry::COMPACT),
        8 => Some(StreamGeometry::TINY),
        _ => None,
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut preset = ExperimentPreset::new(a.preset, a.width);
    apply_overrides(&mut preset, &a)?;
    let opts_base = TrainOptions {
        stop_below: a.stop_below,
        resume: a.resume.as_ref().map(Checkpoint::load).transpose()?,
        input_size: None,
    };
    let outcome = if preset.net.variant == Variant::PretrainedHead {
        train_head(&mut preset, &a, opts_base)?
    } else {
        let mut samples = load_dataset(&a.data)?;
        if let Some(s) = read_split(&a.data.join(SPLIT_FILE))? {
            preset.split = s;
        }
        let size = samples[0].img_a.width;
        if samples[0].img_a.height != size {
            bail!(
                "records are {}x{}; the network takes square inputs",
                size,
                samples[0].img_a.height
            );
        }
        preset.net.input_size = size;
        if a.geometry.is_none() {
            preset.net.geometry = geometry_for(size).with_context(|| {
                format!("no default geometry for {size}x{size} inputs; pass --geometry")
            })?;
        }
        if preset.net.variant == Variant::TwoStreamRgbFast && samples[0].channels() == 3 {
            samples = train::prepare_samples(&samples, size, Some(&preset.fast))?;
        }
        let opts = TrainOptions {
            input_size: Some(size),
            ..opts_base
        };
        train::train(&preset, &samples, a.seed, Some(&a.out), &opts)?
    };
    info!(
        "{} iterations: final train loss {:.6}, test loss {:.6}; outputs in {}",
        outcome.iterations,
        outcome.final_train_loss,
        outcome.final_test_loss,
        a.out.display()
    );
    Ok(())
}

fn train_head(
    preset: &mut ExperimentPreset,
    a: &TrainArgs,
    opts: TrainOptions,
) -> Result<train::TrainOutcome> {
    let SplitSpec::SequenceHoldout {
        train_sequences,
        test_sequences,
    } = &preset.split
    else {
        bail!("the pretrained head trains on a sequence holdout");
    };
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for e in ingest::read_manifest(&a.data)? {
        let poses = ingest::load_poses(&e.pose_file)?;
        let pairs = train::load_activation_pairs(&e.image_dir, &poses, &e.seq_id)?;
        if train_sequences.contains(&e.seq_id) {
            tr.extend(pairs);
        } else if test_sequences.contains(&e.seq_id) {
            te.extend(pairs);
        }
    }
    if tr.is_empty() || te.is_empty() {
        bail!("activation manifest must cover both training and test sequences");
    }
    let shape = tr[0].act_a.shape().to_vec();
    preset.net.activation_shape = [shape[0], shape[1], shape[2]];
    Ok(train::train_pairs(
        preset,
        &ActivationPairs { samples: &tr },
        &ActivationPairs { samples: &te },
        None,
        a.seed,
        Some(&a.out),
        &opts,
    )?)
}

fn infer(a: InferArgs) -> Result<()> {
    let mut model = InferenceModel::load(&a.ckpt)?;
    let frames = ingest::load_frames(&a.seq)?;
    let poses = ingest::load_poses(&a.gt)?;
    if frames.len() != poses.len() {
        bail!(
            "{} frames but {} ground-truth poses",
            frames.len(),
            poses.len()
        );
    }
    let (pred, latency) = eval::infer_sequence(&mut model, &frames)?;
    let loss_path = a
        .loss
        .clone()
        .or_else(|| a.ckpt.parent().map(|p| p.join("loss.csv")))
        .filter(|p| p.exists());
    let loss = match &loss_path {
        Some(p) => Some(LossLog::read_csv(std::io::BufReader::new(fs::File::open(
            p,
        )?))?),
        None => None,
    };
    let mut report = eval::TrajectoryReport::build(&pred, &poses)?;
    report.latency = eval::LatencyStats::from_samples(&latency);
    report.checkpoint_id = model.id.clone();
    report.sequence_id = a.seq.display().to_string();
    report.write(&a.out, loss.as_ref())?;
    info!(
        "{} pairs, terminal deviation {:.3} m, mean {:.2} ms/pair",
        pred.len(),
        report.terminal_deviation(),
        report.latency.map_or(0.0, |l| l.mean_ms)
    );
    Ok(())
}
