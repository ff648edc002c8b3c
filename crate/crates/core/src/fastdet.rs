//! FAST segment-test corner detector.
//!
//! A pixel `p` is a corner when at least `arc_length` contiguous pixels of the
//! 16-pixel radius-3 circle around it are all brighter than `I(p) + t` or all
//! darker than `I(p) - t`. The mask produced here is the extra input channel
//! of the four-channel network variant.

use thiserror::Error;

use crate::ingest::Raster;

/// Radius-3 midpoint circle, clockwise from 12 o'clock (x right, y down).
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FastError {
    #[error("detector needs a single-channel image, got {0} channels")]
    MultiChannelInput(usize),
    #[error("image {0}x{1} is smaller than 7x7")]
    ImageTooSmall(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FastConfig {
    pub threshold: u8,
    pub arc_length: usize,
    pub nms: bool,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            threshold: 20,
            arc_length: 9,
            nms: true,
        }
    }
}

impl FastConfig {
    pub fn validate(&self) -> Result<(), FastError> {
        if self.threshold < 1 {
            return Err(FastError::InvalidConfig("threshold must be >= 1".into()));
        }
        if !(9..=12).contains(&self.arc_length) {
            return Err(FastError::InvalidConfig(format!(
                "arc length {} outside 9..=12",
                self.arc_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: u32,
}

fn check_input(img: &Raster, cfg: &FastConfig) -> Result<(), FastError> {
    cfg.validate()?;
    if img.channels != 1 {
        return Err(FastError::MultiChannelInput(img.channels));
    }
    if img.width < 7 || img.height < 7 {
        return Err(FastError::ImageTooSmall(img.width, img.height));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ring {
    Bright,
    Dark,
    Neither,
}

/// Longest circular run of `kind` in `ring`, returned as `(start, len)`.
fn longest_run(ring: &[Ring; 16], kind: Ring) -> (usize, usize) {
    let mut best = (0, 0);
    let mut start = 0;
    let mut len = 0;
    // two laps cover runs that wrap past index 15
    for i in 0..32 {
        if ring[i % 16] == kind {
            if len == 0 {
                start = i % 16;
            }
            len += 1;
            if len > best.1 {
                best = (start, len.min(16));
            }
        } else {
            len = 0;
        }
    }
    best
}

/// Segment test at one interior pixel; returns the corner score if it passes.
fn segment_test(img: &Raster, x: usize, y: usize, cfg: &FastConfig, precheck: bool) -> Option<u32> {
    let w = img.width as isize;
    let base = (y as isize) * w + x as isize;
    let center = img.data[base as usize] as i32;
    let t = cfg.threshold as i32;
    let px = |k: usize| {
        let (dx, dy) = CIRCLE[k];
        img.data[(base + dy as isize * w + dx as isize) as usize] as i32
    };
    if precheck {
        // any arc of length n covers at least n/4 of the compass points 0, 4, 8, 12
        let need = cfg.arc_length / 4;
        let (mut b, mut d) = (0, 0);
        for k in [0, 4, 8, 12] {
            let v = px(k);
            if v > center + t {
                b += 1;
            } else if v < center - t {
                d += 1;
            }
        }
        if b < need && d < need {
            return None;
        }
    }
    let mut ring = [Ring::Neither; 16];
    let mut diff = [0i32; 16];
    for (k, r) in ring.iter_mut().enumerate() {
        let v = px(k);
        diff[k] = (v - center).abs();
        *r = if v > center + t {
            Ring::Bright
        } else if v < center - t {
            Ring::Dark
        } else {
            Ring::Neither
        };
    }
    [Ring::Bright, Ring::Dark]
        .into_iter()
        .map(|kind| longest_run(&ring, kind))
        .filter(|&(_, len)| len >= cfg.arc_length)
        .map(|(start, len)| (0..len).map(|k| diff[(start + k) % 16] as u32).sum::<u32>())
        .max()
}

fn scan(img: &Raster, cfg: &FastConfig, precheck: bool) -> Vec<Corner> {
    let mut out = Vec::new();
    for y in 3..img.height - 3 {
        for x in 3..img.width - 3 {
            if let Some(score) = segment_test(img, x, y, cfg, precheck) {
                out.push(Corner { x, y, score });
            }
        }
    }
    out
}

/// Keeps corners whose score is a strict 3×3 local maximum; ties go to the
/// earlier pixel in raster order.
fn non_max_suppression(corners: &[Corner], width: usize, height: usize) -> Vec<Corner> {
    let mut score = vec![0u32; width * height];
    let mut present = vec![false; width * height];
    for c in corners {
        score[c.y * width + c.x] = c.score;
        present[c.y * width + c.x] = true;
    }
    corners
        .iter()
        .filter(|c| {
            let me = c.y * width + c.x;
            for ny in c.y - 1..=c.y + 1 {
                for nx in c.x - 1..=c.x + 1 {
                    let n = ny * width + nx;
                    if n == me || !present[n] {
                        continue;
                    }
                    if score[n] > c.score || (score[n] == c.score && n < me) {
                        return false;
                    }
                }
            }
            true
        })
        .copied()
        .collect()
}

/// Segment test over every interior pixel without the compass pre-check.
pub fn detect_reference(img: &Raster, cfg: &FastConfig) -> Result<Vec<Corner>, FastError> {
    check_input(img, cfg)?;
    let raw = scan(img, cfg, false);
    Ok(if cfg.nms {
        non_max_suppression(&raw, img.width, img.height)
    } else {
        raw
    })
}

/// Detects corners in raster order. Uses the compass pre-check, which never
/// changes the result relative to [`detect_reference`].
pub fn detect(img: &Raster, cfg: &FastConfig) -> Result<Vec<Corner>, FastError> {
    check_input(img, cfg)?;
    let raw = scan(img, cfg, true);
    Ok(if cfg.nms {
        non_max_suppression(&raw, img.width, img.height)
    } else {
        raw
    })
}

/// Binary corner mask: 255 at detected corners, 0 elsewhere.
pub fn corner_mask(img: &Raster, cfg: &FastConfig) -> Result<Raster, FastError> {
    let corners = detect(img, cfg)?;
    let mut mask = Raster::filled(img.width, img.height, 1, 0);
    for c in corners {
        mask.set(c.x, c.y, 0, 255);
    }
    Ok(mask)
}

/// Mask for an image of any channel count, converting to luma first.
pub fn corner_mask_any(img: &Raster, cfg: &FastConfig) -> Result<Raster, FastError> {
    if img.channels == 1 {
        corner_mask(img, cfg)
    } else {
        corner_mask(&img.to_luma(), cfg)
    }
}
