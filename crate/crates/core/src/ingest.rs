//! Dataset construction: rasters, resampling, frame pairing, train/test splits
//! and the on-disk sample record format.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{self, DeltaPose, GeomError, PoseMatrix};

/// Default network input edge length.
pub const DEFAULT_SIZE: usize = 256;

pub const RECORD_MAGIC: &[u8; 4] = b"DVOS";
pub const RECORD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("zero-sized raster or target")]
    ZeroDimension,
    #[error("length mismatch: {0} frames vs {1} poses")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("unknown sequence {0:?}")]
    UnknownSequence(String),
    #[error("sequence {0:?} assigned to both train and test")]
    Overlap(String),
    #[error("split leaves the {0} side empty")]
    EmptySide(&'static str),
    #[error("empty sample set")]
    EmptySet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad sample record: {0}")]
    BadRecord(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, IngestError> {
        if data.len() != width * height * channels {
            return Err(IngestError::DimensionMismatch(format!(
                "{}x{}x{} raster needs {} bytes, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Single-channel luma (0.299 R + 0.587 G + 0.114 B); grayscale passes through.
    pub fn to_luma(&self) -> Raster {
        match self.channels {
            1 => self.clone(),
            2 => Raster {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self.data.chunks_exact(2).map(|p| p[0]).collect(),
            },
            c => Raster {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self
                    .data
                    .chunks_exact(c)
                    .map(|p| {
                        let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                        y.round().clamp(0.0, 255.0) as u8
                    })
                    .collect(),
            },
        }
    }

    /// Appends `extra` (single channel, same size) as a new trailing channel.
    pub fn with_extra_channel(&self, extra: &Raster) -> Result<Raster, IngestError> {
        if extra.channels != 1 || extra.width != self.width || extra.height != self.height {
            return Err(IngestError::DimensionMismatch(format!(
                "mask {}x{}x{} does not fit image {}x{}",
                extra.width, extra.height, extra.channels, self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(self.width * self.height * (c + 1));
        for (px, m) in self.data.chunks_exact(c).zip(&extra.data) {
            data.extend_from_slice(px);
            data.push(*m);
        }
        Ok(Raster {
            width: self.width,
            height: self.height,
            channels: c + 1,
            data,
        })
    }

    /// Removes the trailing channel.
    pub fn without_last_channel(&self) -> Raster {
        let c = self.channels;
        Raster {
            width: self.width,
            height: self.height,
            channels: c - 1,
            data: self
                .data
                .chunks_exact(c)
                .flat_map(|p| p[..c - 1].iter().copied())
                .collect(),
        }
    }

    /// Writes unit-scaled, per-channel normalized planar (CHW) values into `out`.
    pub fn write_normalized_chw(&self, norm: &NormStats, out: &mut [f32]) {
        let plane = self.width * self.height;
        debug_assert_eq!(out.len(), plane * self.channels);
        for c in 0..self.channels {
            let mean = norm.mean[c];
            let inv = 1.0 / norm.std[c];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for (i, d) in dst.iter_mut().enumerate() {
                let v = self.data[i * self.channels + c] as f64 / 255.0;
                *d = ((v - mean) * inv) as f32;
            }
        }
    }
}

/// Loads an image file into an 8-bit raster (gray, RGB or RGBA).
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|e| IngestError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img {
        D::ImageLuma8(b) => (1, b.into_raw()),
        D::ImageRgb8(b) => (3, b.into_raw()),
        D::ImageRgba8(b) => (4, b.into_raw()),
        D::ImageLuma16(_) => (1, img.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Raster::new(w, h, channels, data)
}

/// Saves a raster as PNG. Four-channel rasters are written as RGBA.
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let color = match raster.channels {
        1 => image::ExtendedColorType::L8,
        2 => image::ExtendedColorType::La8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => {
            return Err(IngestError::DimensionMismatch(format!(
                "cannot save {c}-channel raster"
            )))
        }
    };
    image::save_buffer(
        path,
        &raster.data,
        raster.width as u32,
        raster.height as u32,
        color,
    )
    .map_err(|e| IngestError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Bilinear resample with independent x/y scale factors (aspect ratio is not kept).
pub fn warp_resize(img: &Raster, out_w: usize, out_h: usize) -> Result<Raster, IngestError> {
    if img.width == 0 || img.height == 0 || img.channels == 0 || out_w == 0 || out_h == 0 {
        return Err(IngestError::ZeroDimension);
    }
    if img.width == out_w && img.height == out_h {
        return Ok(img.clone());
    }
    let c = img.channels;
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let mut data = vec![0u8; out_w * out_h * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p00 = img.get(x0, y0, ch) as f64;
                let p10 = img.get(x1, y0, ch) as f64;
                let p01 = img.get(x0, y1, ch) as f64;
                let p11 = img.get(x1, y1, ch) as f64;
                let top = p00 + (p10 - p00) * fx;
                let bot = p01 + (p11 - p01) * fx;
                let v = top + (bot - top) * fy;
                data[(oy * out_w + ox) * c + ch] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(Raster {
        width: out_w,
        height: out_h,
        channels: c,
        data,
    })
}

/// One training example: two consecutive frames and the motion between them.
#[derive(Debug, Clone)]
pub struct Sample {
    pub img_a: Arc<Raster>,
    pub img_b: Arc<Raster>,
    pub label: DeltaPose,
    pub seq_id: String,
    pub frame_idx: usize,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.img_a.channels
    }
}

/// Pairs frame `i` with frame `i + 1`, labelled with their relative motion.
pub fn build_pairs(
    frames: &[Raster],
    poses: &[PoseMatrix],
    seq_id: &str,
) -> Result<Vec<Sample>, IngestError> {
    if frames.len() != poses.len() {
        return Err(IngestError::LengthMismatch(frames.len(), poses.len()));
    }
    if frames.len() < 2 {
        return Err(IngestError::TooShort(frames.len()));
    }
    if let Some(bad) = frames.iter().find(|f| !f.same_dims(&frames[0])) {
        return Err(IngestError::DimensionMismatch(format!(
            "frame {}x{}x{} differs from first frame {}x{}x{}",
            bad.width,
            bad.height,
            bad.channels,
            frames[0].width,
            frames[0].height,
            frames[0].channels
        )));
    }
    let shared: Vec<Arc<Raster>> = frames.iter().cloned().map(Arc::new).collect();
    Ok(poses
        .windows(2)
        .enumerate()
        .map(|(i, w)| Sample {
            img_a: shared[i].clone(),
            img_b: shared[i + 1].clone(),
            label: geom::relative_delta(&w[0], &w[1]),
            seq_id: seq_id.to_string(),
            frame_idx: i,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Whole sequences go to one side or the other.
    SequenceHoldout {
        train_sequences: Vec<String>,
        test_sequences: Vec<String>,
    },
    /// Seeded shuffle inside every sequence, prefix split at `train_fraction`, pooled.
    WithinSequenceRandom { train_fraction: f64, seed: u64 },
}

impl SplitSpec {
    /// Sequences 00-06 for training and 07-10 for testing.
    pub fn default_holdout() -> Self {
        SplitSpec::SequenceHoldout {
            train_sequences: (0..7).map(|i| format!("{i:02}")).collect(),
            test_sequences: (7..11).map(|i| format!("{i:02}")).collect(),
        }
    }

    pub fn random(train_fraction: f64, seed: u64) -> Self {
        SplitSpec::WithinSequenceRandom {
            train_fraction,
            seed,
        }
    }
}

/// Splits samples into `(train, test)`. Each side keeps the input order.
pub fn split(
    samples: &[Sample],
    spec: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>), IngestError> {
    if samples.is_empty() {
        return Err(IngestError::EmptySet);
    }
    let mut is_train = vec![false; samples.len()];
    match spec {
        SplitSpec::SequenceHoldout {
            train_sequences,
            test_sequences,
        } => {
            let train: BTreeSet<&str> = train_sequences.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = test_sequences.iter().map(String::as_str).collect();
            if let Some(both) = train.intersection(&test).next() {
                return Err(IngestError::Overlap(both.to_string()));
            }
            let present: BTreeSet<&str> = samples.iter().map(|s| s.seq_id.as_str()).collect();
            if let Some(missing) = train.union(&test).find(|s| !present.contains(*s)) {
                return Err(IngestError::UnknownSequence(missing.to_string()));
            }
            for (flag, s) in is_train.iter_mut().zip(samples) {
                if train.contains(s.seq_id.as_str()) {
                    *flag = true;
                } else if !test.contains(s.seq_id.as_str()) {
                    return Err(IngestError::UnknownSequence(s.seq_id.clone()));
                }
            }
        }
        SplitSpec::WithinSequenceRandom {
            train_fraction,
            seed,
        } => {
            if !(0.0..=1.0).contains(train_fraction) {
                return Err(IngestError::DimensionMismatch(format!(
                    "train fraction {train_fraction} outside [0, 1]"
                )));
            }
            let mut order: Vec<&str> = Vec::new();
            let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, s) in samples.iter().enumerate() {
                groups
                    .entry(s.seq_id.as_str())
                    .or_insert_with(|| {
                        order.push(s.seq_id.as_str());
                        Vec::new()
                    })
                    .push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for id in order {
                let mut idx = groups.remove(id).expect("group exists");
                idx.shuffle(&mut rng);
                let n_train = (train_fraction * idx.len() as f64).round() as usize;
                for &i in &idx[..n_train] {
                    is_train[i] = true;
                }
            }
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, t) in samples.iter().zip(is_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    if train.is_empty() {
        return Err(IngestError::EmptySide("train"));
    }
    if test.is_empty() {
        return Err(IngestError::EmptySide("test"));
    }
    Ok((train, test))
}

/// Per-channel statistics of unit-scaled training pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Zero mean, unit std (no-op normalization) for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and std over both frames of every sample. A zero std is clamped to 1.
pub fn compute_norm_stats(train: &[Sample]) -> Result<NormStats, IngestError> {
    let first = train.first().ok_or(IngestError::EmptySet)?;
    let c = first.channels();
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    let mut count = 0usize;
    for s in train {
        for img in [&s.img_a, &s.img_b] {
            if img.channels != c {
                return Err(IngestError::DimensionMismatch(format!(
                    "mixed channel counts {} and {}",
                    c, img.channels
                )));
            }
            for px in img.data.chunks_exact(c) {
                for (ch, &v) in px.iter().enumerate() {
                    let v = v as f64 / 255.0;
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
            count += img.width * img.height;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Appends a single-channel mask to both frames of `s`.
pub fn augment_with_feature_channel(
    s: &Sample,
    mask_a: &Raster,
    mask_b: &Raster,
) -> Result<Sample, IngestError> {
    Ok(Sample {
        img_a: Arc::new(s.img_a.with_extra_channel(mask_a)?),
        img_b: Arc::new(s.img_b.with_extra_channel(mask_b)?),
        label: s.label,
        seq_id: s.seq_id.clone(),
        frame_idx: s.frame_idx,
    })
}

/// Writes one `DVOS` record: 16-byte header, both frames, three f64 labels.
pub fn write_record(
    mut w: impl Write,
    img_a: &Raster,
    img_b: &Raster,
    label: &DeltaPose,
) -> std::io::Result<()> {
    assert!(
        img_a.same_dims(img_b),
        "record frames must share dimensions"
    );
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    w.write_all(&(img_a.width as u32).to_le_bytes())?;
    w.write_all(&(img_a.height as u32).to_le_bytes())?;
    w.write_all(&(img_a.channels as u16).to_le_bytes())?;
    w.write_all(&img_a.data)?;
    w.write_all(&img_b.data)?;
    for v in label.as_array() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record, or `None` at a clean end of stream.
pub fn read_record(mut r: impl Read) -> Result<Option<(Raster, Raster, DeltaPose)>, IngestError> {
    let bad = |m: &str| IngestError::BadRecord(m.to_string());
    let mut header = [0u8; 16];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(bad("truncated header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(IngestError::BadRecord(e.to_string())),
        }
    }
    if &header[0..4] != RECORD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != RECORD_VERSION {
        return Err(IngestError::BadRecord(format!(
            "unsupported version {version}"
        )));
    }
    let w = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let c = u16::from_le_bytes([header[14], header[15]]) as usize;
    let n = w * h * c;
    let mut a = vec![0u8; n];
    let mut b = vec![0u8; n];
    r.read_exact(&mut a).map_err(|_| bad("truncated frame a"))?;
    r.read_exact(&mut b).map_err(|_| bad("truncated frame b"))?;
    let mut lab = [0.0f64; 3];
    for v in &mut lab {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| bad("truncated label"))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Some((
        Raster::new(w, h, c, a)?,
        Raster::new(w, h, c, b)?,
        DeltaPose {
            dx: lab[0],
            dz: lab[1],
            dtheta: lab[2],
        },
    )))
}

/// Writes all samples of one sequence to `path` as consecutive records.
pub fn write_sequence_records(path: &Path, samples: &[Sample]) -> Result<(), IngestError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        write_record(&mut w, &s.img_a, &s.img_b, &s.label).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a record file written by [`write_sequence_records`]. Consecutive
/// samples share frames again when the bytes match.
pub fn read_sequence_records(path: &Path, seq_id: &str) -> Result<Vec<Sample>, IngestError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut out: Vec<Sample> = Vec::new();
    while let Some((a, b, label)) = read_record(&mut r)? {
        let img_a = match out.last() {
            Some(prev) if *prev.img_b == a => prev.img_b.clone(),
            _ => Arc::new(a),
        };
        out.push(Sample {
            img_a,
            img_b: Arc::new(b),
            label,
            seq_id: seq_id.to_string(),
            frame_idx: out.len(),
        });
    }
    Ok(out)
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seq_id: String,
    pub image_dir: PathBuf,
    pub pose_file: PathBuf,
}

/// Parses `<seq_id> <image_dir> <pose_file>` lines; relative paths resolve against `base`.
pub fn parse_manifest(
    reader: impl BufRead,
    base: &Path,
) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(base))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(IngestError::Manifest {
                line: i + 1,
                msg: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            seq_id: parts[0].to_string(),
            image_dir: resolve(parts[1]),
            pose_file: resolve(parts[2]),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let f = File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(BufReader::new(f), base)
}

/// Image files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Raster>, IngestError> {
    list_images(dir)?.iter().map(load_raster).collect()
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseMatrix>, IngestError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(geom::read_pose_file(BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, data: Vec<u8>) -> Raster {
        Raster::new(w, h, 1, data).unwrap()
    }

    fn seq_samples(id: &str, n: usize) -> Vec<Sample> {
        let frames: Vec<Raster> = (0..=n).map(|i| Raster::filled(2, 2, 3, i as u8)).collect();
        let poses: Vec<PoseMatrix> = (0..=n)
            .map(|i| PoseMatrix::planar(0.0, i as f64, 0.0))
            .collect();
        build_pairs(&frames, &poses, id).unwrap()
    }

    #[test]
    fn identity_resample_is_byte_identical() {
        let data: Vec<u8> = (0..256 * 256 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let img = Raster::new(256, 256, 3, data).unwrap();
        assert_eq!(warp_resize(&img, 256, 256).unwrap(), img);
    }

    #[test]
    fn kitti_sized_frame_warps_to_square() {
        let img = Raster::filled(1241, 376, 3, 9);
        let out = warp_resize(&img, 256, 256).unwrap();
        assert_eq!((out.width, out.height, out.channels), (256, 256, 3));
    }

    #[test]
    fn upsample_two_pixels() {
        let out = warp_resize(&gray(2, 1, vec![0, 255]), 4, 1).unwrap();
        // sample positions clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1
        assert_eq!(out.data, vec![0, 64, 191, 255]);
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = gray(2, 1, vec![0, 255]);
        assert!(matches!(
            warp_resize(&img, 0, 4),
            Err(IngestError::ZeroDimension)
        ));
        let empty = Raster::new(0, 0, 1, vec![]).unwrap();
        assert!(matches!(
            warp_resize(&empty, 4, 4),
            Err(IngestError::ZeroDimension)
        ));
    }

    #[test]
    fn pairs_and_errors() {
        let frames = vec![Raster::filled(2, 2, 1, 0); 2];
        let poses = vec![PoseMatrix::identity(); 2];
        let s = build_pairs(&frames, &poses, "00").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label.as_array(), [0.0, 0.0, 0.0]);
        assert!(matches!(
            build_pairs(&frames, &poses[..1], "00"),
            Err(IngestError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            build_pairs(&frames[..1], &poses[..1], "00"),
            Err(IngestError::TooShort(1))
        ));
    }

    #[test]
    fn pair_count_over_corpus() {
        let lens = [5usize, 9, 2, 17];
        let total: usize = lens.iter().map(|&l| seq_samples("x", l - 1).len()).sum();
        assert_eq!(total, lens.iter().map(|l| l - 1).sum::<usize>());
    }

    #[test]
    fn random_split_counts_and_determinism() {
        let samples = seq_samples("00", 100);
        let (tr, te) = split(&samples, &SplitSpec::random(0.8, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let (tr, te) = split(&samples, &SplitSpec::random(0.5, 1)).unwrap();
        assert_eq!((tr.len(), te.len()), (50, 50));
        let (tr2, _) = split(&samples, &SplitSpec::random(0.5, 1)).unwrap();
        let idx = |v: &[Sample]| v.iter().map(|s| s.frame_idx).collect::<Vec<_>>();
        assert_eq!(idx(&tr), idx(&tr2));
        let (tr3, _) = split(&samples, &SplitSpec::random(0.5, 2)).unwrap();
        assert_ne!(idx(&tr), idx(&tr3));
    }

    #[test]
    fn random_split_covers_every_sequence() {
        let mut samples = seq_samples("a", 20);
        samples.extend(seq_samples("b", 30));
        let (tr, te) = split(&samples, &SplitSpec::random(0.8, 5)).unwrap();
        for id in ["a", "b"] {
            assert!(tr.iter().any(|s| s.seq_id == id));
            assert!(te.iter().any(|s| s.seq_id == id));
        }
        assert_eq!(tr.iter().filter(|s| s.seq_id == "a").count(), 16);
        assert_eq!(tr.iter().filter(|s| s.seq_id == "b").count(), 24);
    }

    #[test]
    fn holdout_split() {
        let mut samples = seq_samples("a", 5);
        samples.extend(seq_samples("b", 4));
        samples.extend(seq_samples("c", 3));
        let spec = SplitSpec::SequenceHoldout {
            train_sequences: vec!["a".into(), "c".into()],
            test_sequences: vec!["b".into()],
        };
        let (tr, te) = split(&samples, &spec).unwrap();
        assert_eq!(tr.len(), 8);
        assert!(te.iter().all(|s| s.seq_id == "b"));
        let spec = SplitSpec::SequenceHoldout {
            train_sequences: vec!["a".into()],
            test_sequences: vec!["b".into()],
        };
        assert!(matches!(split(&samples, &spec), Err(IngestError::UnknownSequence(s)) if s == "c"));
        let spec = SplitSpec::SequenceHoldout {
            train_sequences: vec!["a".into(), "b".into(), "c".into()],
            test_sequences: vec![],
        };
        assert!(matches!(
            split(&samples, &spec),
            Err(IngestError::EmptySide("test"))
        ));
        assert!(matches!(
            split(&samples, &SplitSpec::default_holdout()),
            Err(IngestError::UnknownSequence(_))
        ));
    }

    #[test]
    fn norm_stats_cases() {
        let make = |vals: &[u8]| -> Vec<Sample> {
            let frames: Vec<Raster> = vals.iter().map(|&v| Raster::filled(3, 3, 3, v)).collect();
            let poses = vec![PoseMatrix::identity(); vals.len()];
            build_pairs(&frames, &poses, "s").unwrap()
        };
        let zero = compute_norm_stats(&make(&[0, 0])).unwrap();
        assert_eq!(zero.mean, vec![0.0; 3]);
        assert_eq!(zero.std, vec![1.0; 3]);
        let c128 = compute_norm_stats(&make(&[128, 128])).unwrap();
        assert!((c128.mean[0] - 128.0 / 255.0).abs() < 1e-12);
        let half = compute_norm_stats(&make(&[0, 255])).unwrap();
        assert!((half.mean[1] - 0.5).abs() < 1e-12);
        assert!((half.std[1] - 0.5).abs() < 1e-12);
        assert!(matches!(
            compute_norm_stats(&[]),
            Err(IngestError::EmptySet)
        ));
    }

    #[test]
    fn feature_channel_appends_and_drops() {
        let data: Vec<u8> = (0..256 * 256 * 3).map(|i| (i % 253) as u8).collect();
        let img = Arc::new(Raster::new(256, 256, 3, data).unwrap());
        let s = Sample {
            img_a: img.clone(),
            img_b: img.clone(),
            label: DeltaPose::default(),
            seq_id: "s".into(),
            frame_idx: 0,
        };
        let zero = Raster::filled(256, 256, 1, 0);
        let aug = augment_with_feature_channel(&s, &zero, &zero).unwrap();
        assert_eq!(aug.img_a.channels, 4);
        for px in aug.img_a.data.chunks_exact(4) {
            assert_eq!(px[3], 0);
        }
        assert_eq!(aug.img_a.without_last_channel(), *img);
        let wrong = Raster::filled(128, 256, 1, 0);
        assert!(matches!(
            augment_with_feature_channel(&s, &wrong, &zero),
            Err(IngestError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn record_round_trip() {
        let a = Raster::new(3, 2, 3, (0..18).collect()).unwrap();
        let b = Raster::new(3, 2, 3, (100..118).collect()).unwrap();
        let label = DeltaPose::new(0.25, -1.5, 0.01);
        let mut buf = Vec::new();
        write_record(&mut buf, &a, &b, &label).unwrap();
        assert_eq!(buf.len(), 16 + 36 + 24);
        assert_eq!(&buf[..4], b"DVOS");
        let (ra, rb, rl) = read_record(&buf[..]).unwrap().unwrap();
        assert_eq!((ra, rb, rl), (a, b, label));
        assert!(read_record(&buf[..buf.len() - 1]).is_err());
        assert!(read_record(&[][..]).unwrap().is_none());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\n00 img/00 poses/00.txt\n\n01 /abs/img /abs/p.txt\n";
        let m = parse_manifest(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image_dir, PathBuf::from("/data/img/00"));
        assert_eq!(m[1].pose_file, PathBuf::from("/abs/p.txt"));
        assert!(parse_manifest("00 only-two".as_bytes(), Path::new(".")).is_err());
    }

    #[test]
    fn luma_weights() {
        let img = Raster::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        assert_eq!(img.to_luma().data, vec![76]);
        let img = Raster::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        assert_eq!(img.to_luma().data, vec![255]);
    }
}
