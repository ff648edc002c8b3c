//! Procedural driving world: a textured ground plane under a skyline band,
//! viewed by a forward-looking pinhole camera that follows a scripted planar
//! path. Poses are exact, so every rendered pair has a known motion label.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{self, DeltaPose, PlanarState, PoseMatrix};
use crate::ingest::{self, IngestError, Raster, Sample};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Image row of the horizon as a fraction of the height, so most of the
/// frame sees the ground.
pub const HORIZON_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    /// Side of the square drivable region in meters (before scaling).
    pub extent: f64,
    /// Finest texel size of the ground texture in meters.
    pub texture_cell: f64,
    pub camera_height: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// Square output edge in pixels.
    pub image_size: usize,
    /// Multiplies all world geometry: heights, texels and script speeds.
    pub scale_factor: f64,
    /// Index of the region; regions tile the world along x without overlap.
    pub region: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            extent: 400.0,
            texture_cell: 0.5,
            camera_height: 1.6,
            focal: 32.0,
            image_size: 64,
            scale_factor: 1.0,
            region: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let pos = [
            ("extent", self.extent),
            ("texture_cell", self.texture_cell),
            ("camera_height", self.camera_height),
            ("focal", self.focal),
            ("scale_factor", self.scale_factor),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.image_size == 0 {
            return Err(SynthError::InvalidConfig(
                "image_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// World-x offset of this region's square.
    fn region_origin(&self) -> f64 {
        self.region as f64 * self.extent * self.scale_factor
    }
}

/// Per-frame `(speed m/frame, yaw_rate rad/frame)` commands, in unscaled units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotionScript {
    pub commands: Vec<(f64, f64)>,
}

impl MotionScript {
    pub fn new(commands: Vec<(f64, f64)>) -> Self {
        Self { commands }
    }

    pub fn straight(n: usize, speed: f64) -> Self {
        Self::new(vec![(speed, 0.0); n])
    }

    /// Independent uniform draws of speed in `speed` and yaw rate in `±max_yaw`.
    pub fn random(n: usize, speed: (f64, f64), max_yaw: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let commands = (0..n)
            .map(|_| {
                let s = rng.random_range(speed.0..=speed.1);
                let y = if max_yaw > 0.0 {
                    rng.random_range(-max_yaw..=max_yaw)
                } else {
                    0.0
                };
                (s, y)
            })
            .collect();
        Self::new(commands)
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    /// Parses `speed,yaw_rate` lines; a non-numeric first line is a header.
    pub fn parse_csv(text: &str) -> Result<Self, SynthError> {
        let mut commands = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match parts.as_slice() {
                [s, y] => s.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
                _ => None,
            };
            match parsed {
                Some(c) => commands.push(c),
                None if i == 0 => continue,
                None => {
                    return Err(SynthError::InvalidConfig(format!(
                        "script line {}: expected speed,yaw_rate",
                        i + 1
                    )))
                }
            }
        }
        Ok(Self::new(commands))
    }
}

/// Rendered frames and their camera poses (`frames.len() == poses.len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub frames: Vec<Raster>,
    pub poses: Vec<PoseMatrix>,
}

impl SynthSequence {
    pub fn samples(&self, seq_id: &str) -> Result<Vec<Sample>, SynthError> {
        Ok(ingest::build_pairs(&self.frames, &self.poses, seq_id)?)
    }

    /// Writes `images/NNNNNN.png` and `poses.txt` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        for (i, f) in self.frames.iter().enumerate() {
            ingest::save_raster(f, img_dir.join(format!("{i:06}.png")))?;
        }
        let pose_path = dir.join("poses.txt");
        let file = fs::File::create(&pose_path).map_err(io_err(&pose_path))?;
        let mut w = BufWriter::new(file);
        geom::write_pose_file(&mut w, &self.poses).map_err(io_err(&pose_path))?;
        w.flush().map_err(io_err(&pose_path))?;
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes several sequences plus a `manifest.txt` listing them.
pub fn write_corpus(dir: &Path, seqs: &[(String, SynthSequence)]) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (id, seq) in seqs {
        seq.write_to_dir(&dir.join(id))?;
        manifest.push_str(&format!("{id} {id}/images {id}/poses.txt\n"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iz: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iz as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[0, 1)` with unit lattice spacing.
fn value_noise(seed: u64, x: f64, z: f64) -> f64 {
    let (fx, fz) = (x.floor(), z.floor());
    let (ix, iz) = (fx as i64, fz as i64);
    let (tx, tz) = (smooth(x - fx), smooth(z - fz));
    let a = lattice(seed, ix, iz);
    let b = lattice(seed, ix + 1, iz);
    let c = lattice(seed, ix, iz + 1);
    let d = lattice(seed, ix + 1, iz + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * tz
}

/// Sharp-edged disks scattered on the ground, one lattice cell of this many
/// texels at most holding one disk. They give the frames crisp features to
/// track, which the smooth noise alone lacks.
const MARKER_SPACING: f64 = 4.0;
const MARKER_DENSITY: f64 = 0.5;

/// Antialiased coverage in `[0, 1]` of the marker disk (if any) in the
/// lattice cell containing ground point `(x, z)`.
fn marker_coverage(seed: u64, x: f64, z: f64, spacing: f64, footprint: f64) -> f64 {
    let (cx, cz) = ((x / spacing).floor(), (z / spacing).floor());
    let key = seed ^ 0x6d61_726b;
    let (ix, iz) = (cx as i64, cz as i64);
    if lattice(key, ix, iz) >= MARKER_DENSITY {
        return 0.0;
    }
    let r = (0.15 + 0.25 * lattice(key + 1, ix, iz)) * spacing;
    let ox = (cx * spacing) + r + lattice(key + 2, ix, iz) * (spacing - 2.0 * r);
    let oz = (cz * spacing) + r + lattice(key + 3, ix, iz) * (spacing - 2.0 * r);
    let d = ((x - ox).powi(2) + (z - oz).powi(2)).sqrt() - r;
    (0.5 - d / footprint.max(1e-9)).clamp(0.0, 1.0)
}

/// Colors and skyline drawn once per world.
struct Palette {
    ground_dark: [f64; 3],
    ground_light: [f64; 3],
    sky_top: [f64; 3],
    sky_low: [f64; 3],
    building: [f64; 3],
    marker: [f64; 3],
    skyline: Vec<f64>,
    shades: Vec<f64>,
}

const SKYLINE_BINS: usize = 96;
/// Summed octaves cluster near 0.5; this stretches them back over the palette.
const GROUND_CONTRAST: f64 = 3.5;
/// Cell multiples of the texture octaves, coarse to fine, with weights.
const OCTAVES: [(f64, f64); 4] = [(8.0, 0.35), (4.0, 0.3), (2.0, 0.2), (1.0, 0.15)];

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed));
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_: u8| rng.random_range(lo..hi));
        let ground_dark = color(20.0, 70.0);
        let ground_light = color(150.0, 230.0);
        let sky_top = color(60.0, 140.0);
        let sky_low = color(170.0, 240.0);
        let building = color(30.0, 110.0);
        let marker = color(200.0, 255.0);
        let skyline = (0..SKYLINE_BINS)
            .map(|_| rng.random_range(0.02..0.25))
            .collect();
        let shades = (0..SKYLINE_BINS)
            .map(|_| rng.random_range(0.6..1.4))
            .collect();
        Self {
            ground_dark,
            ground_light,
            sky_top,
            sky_low,
            building,
            marker,
            skyline,
            shades,
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders the world seen from `pose` (camera frame: x right, y down, z forward).
pub fn render_frame(cfg: &WorldConfig, pose: &PoseMatrix) -> Raster {
    let pal = Palette::new(cfg.seed);
    render_with(cfg, &pal, pose)
}

fn render_with(cfg: &WorldConfig, pal: &Palette, pose: &PoseMatrix) -> Raster {
    let n = cfg.image_size;
    let f = cfg.focal;
    let cx = n as f64 / 2.0;
    let cy = n as f64 * HORIZON_FRACTION;
    let h = cfg.camera_height * cfg.scale_factor;
    let cell = cfg.texture_cell * cfg.scale_factor;
    let r = pose.r;
    let mut data = vec![0u8; n * n * 3];
    for v in 0..n {
        let dy = (v as f64 + 0.5 - cy) / f;
        for u in 0..n {
            let dxc = (u as f64 + 0.5 - cx) / f;
            let wx = r[(0, 0)] * dxc + r[(0, 2)];
            let wz = r[(2, 0)] * dxc + r[(2, 2)];
            let rgb = if dy > 0.0 {
                let t = h / dy;
                let gx = pose.t[0] + t * wx;
                let gz = pose.t[2] + t * wz;
                // Ground footprint of one pixel, stretched by the grazing angle.
                let norm = (dxc * dxc + dy * dy + 1.0).sqrt();
                let footprint = t * norm / f * (norm / dy);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (k, &(mult, weight)) in OCTAVES.iter().enumerate() {
                    let size = cell * mult;
                    let fade = ((size / footprint - 1.0) / 2.0).clamp(0.0, 1.0);
                    let noise = value_noise(cfg.seed.wrapping_add(k as u64), gx / size, gz / size);
                    acc += weight * (fade * noise + (1.0 - fade) * 0.5);
                    wsum += weight;
                }
                let ground = mix(
                    pal.ground_dark,
                    pal.ground_light,
                    (0.5 + GROUND_CONTRAST * (acc / wsum - 0.5)).clamp(0.0, 1.0),
                );
                let cover = marker_coverage(cfg.seed, gx, gz, cell * MARKER_SPACING, footprint);
                mix(ground, pal.marker, cover)
            } else {
                let az = wx.atan2(wz);
                let elev = -dy / (dxc * dxc + 1.0).sqrt();
                let pos = (az / std::f64::consts::TAU + 0.5) * SKYLINE_BINS as f64;
                let bin = (pos.floor() as usize).min(SKYLINE_BINS - 1);
                if elev < pal.skyline[bin] {
                    pal.building.map(|c| c * pal.shades[bin])
                } else {
                    mix(pal.sky_low, pal.sky_top, (elev * 2.0).min(1.0))
                }
            };
            let o = (v * n + u) * 3;
            for c in 0..3 {
                data[o + c] = to_u8(rgb[c]);
            }
        }
    }
    Raster {
        width: n,
        height: n,
        channels: 3,
        data,
    }
}

/// Integrates the script from the region center and renders every pose.
pub fn render_sequence(
    cfg: &WorldConfig,
    script: &MotionScript,
) -> Result<SynthSequence, SynthError> {
    render_sequence_from(cfg, script, PlanarState::origin())
}

/// Like [`render_sequence`], starting at `start`: an offset from the region
/// center in unscaled meters plus a heading.
pub fn render_sequence_from(
    cfg: &WorldConfig,
    script: &MotionScript,
    start: PlanarState,
) -> Result<SynthSequence, SynthError> {
    cfg.validate()?;
    if !(start.x.is_finite() && start.z.is_finite() && start.theta.is_finite()) {
        return Err(SynthError::InvalidConfig(format!(
            "non-finite start {start:?}"
        )));
    }
    if script.is_empty() {
        return Err(SynthError::InvalidConfig("motion script is empty".into()));
    }
    if let Some(c) = script
        .commands
        .iter()
        .find(|(s, y)| !(s.is_finite() && y.is_finite()))
    {
        return Err(SynthError::InvalidConfig(format!(
            "non-finite command {c:?}"
        )));
    }
    let s = cfg.scale_factor;
    let half = cfg.extent * s / 2.0;
    let x0 = cfg.region_origin() + half;
    let deltas: Vec<DeltaPose> = script
        .commands
        .iter()
        .map(|&(speed, yaw)| DeltaPose::new(0.0, speed * s, yaw))
        .collect();
    let origin = PlanarState::new(x0 + start.x * s, half + start.z * s, start.theta);
    let states = geom::integrate_trajectory(origin, &deltas);
    let lo_x = cfg.region_origin();
    if let Some(st) = states
        .iter()
        .find(|st| st.x < lo_x || st.x > lo_x + 2.0 * half || st.z < 0.0 || st.z > 2.0 * half)
    {
        return Err(SynthError::InvalidConfig(format!(
            "path leaves the {}m region at ({:.1}, {:.1})",
            cfg.extent * s,
            st.x,
            st.z
        )));
    }
    let poses: Vec<PoseMatrix> = states
        .iter()
        .map(|st| PoseMatrix::planar(st.x, st.z, st.theta))
        .collect();
    let pal = Palette::new(cfg.seed);
    let frames = poses.iter().map(|p| render_with(cfg, &pal, p)).collect();
    Ok(SynthSequence { frames, poses })
}

/// Config of the second, disjoint region: next region slot, derived seed, own scale.
pub fn region_b_config(cfg: &WorldConfig, b_scale: f64) -> WorldConfig {
    WorldConfig {
        seed: splitmix(cfg.seed ^ 0xb0b0_b0b0),
        region: cfg.region + 1,
        scale_factor: b_scale,
        ..cfg.clone()
    }
}

/// Renders every script in region A (`cfg`) and in region B
/// ([`region_b_config`] with `b_scale`).
pub fn region_split(
    cfg: &WorldConfig,
    scripts: &[MotionScript],
    b_scale: f64,
) -> Result<(Vec<SynthSequence>, Vec<SynthSequence>), SynthError> {
    let b = region_b_config(cfg, b_scale);
    let a_seqs = scripts
        .iter()
        .map(|s| render_sequence(cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let b_seqs = scripts
        .iter()
        .map(|s| render_sequence(&b, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((a_seqs, b_seqs))
}

/// Start pose plus motion script.
pub type Route = (PlanarState, MotionScript);

/// `n` routes of `len` random steps, starting uniformly within `spread`
/// meters of the region center with uniform heading.
pub fn random_routes(
    n: usize,
    len: usize,
    speed: (f64, f64),
    max_yaw: f64,
    spread: f64,
    seed: u64,
) -> Vec<Route> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7007e5));
    (0..n)
        .map(|i| {
            let start = PlanarState::new(
                rng.random_range(-spread..=spread),
                rng.random_range(-spread..=spread),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            (
                start,
                MotionScript::random(len, speed, max_yaw, splitmix(seed.wrapping_add(i as u64))),
            )
        })
        .collect()
}

/// [`region_split`] over routes with explicit start poses.
pub fn region_split_routes(
    cfg: &WorldConfig,
    routes: &[Route],
    b_scale: f64,
) -> Result<(Vec<SynthSequence>, Vec<SynthSequence>), SynthError> {
    let b = region_b_config(cfg, b_scale);
    let render = |c: &WorldConfig| {
        routes
            .iter()
            .map(|(start, script)| render_sequence_from(c, script, *start))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok((render(cfg)?, render(&b)?))
}
