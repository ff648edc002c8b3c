//! Brute-force segment test: every one of the 16 rotations of the
//! contiguity predicate at every interior pixel.

use deepvo::ingest::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bresenham circle of radius 3, clockwise from straight up.
const RING: [(i64, i64); 16] = [
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

pub fn corners(img: &Raster, threshold: u8, arc: usize) -> Vec<(usize, usize)> {
    let at = |x: i64, y: i64| img.data[y as usize * img.width + x as usize] as i64;
    let t = threshold as i64;
    let mut out = Vec::new();
    for y in 3..img.height as i64 - 3 {
        for x in 3..img.width as i64 - 3 {
            let p = at(x, y);
            let ring: Vec<i64> = RING.iter().map(|(dx, dy)| at(x + dx, y + dy)).collect();
            let hit = (0..16).any(|start| {
                let arc_vals = (0..arc).map(|k| ring[(start + k) % 16]);
                arc_vals.clone().all(|v| v > p + t) || arc_vals.clone().all(|v| v < p - t)
            });
            if hit {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Random 64x64 grey image: noise over a few hard-edged rectangles, so both
/// textured and corner-rich regions occur.
pub fn random_image(seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (64usize, 64usize);
    let mut data: Vec<u8> = (0..w * h)
        .map(|_| rng.random_range(0..=255u8) / 4 + 96)
        .collect();
    for _ in 0..6 {
        let (x0, y0) = (rng.random_range(0..w - 8), rng.random_range(0..h - 8));
        let (rw, rh) = (rng.random_range(4..w - x0), rng.random_range(4..h - y0));
        let v: u8 = rng.random();
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                data[y * w + x] = v;
            }
        }
    }
    Raster::new(w, h, 1, data).unwrap()
}
