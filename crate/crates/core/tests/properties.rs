//! Property tests over geometry, ingest, the corner detector and the
//! data-moving layers.

use std::sync::Arc;

use deepvo::fastdet::{self, FastConfig};
use deepvo::geom::{self, DeltaPose, PlanarState, PoseMatrix};
use deepvo::ingest::{self, Raster, Sample, SplitSpec};
use deepvo::nncore::ops::{concat, concat_backward};
use deepvo::nncore::{Layer, LayerSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn planar_path(steps: &[(f64, f64, f64)]) -> Vec<PoseMatrix> {
    let mut s = PlanarState::origin();
    let mut out = vec![PoseMatrix::planar(s.x, s.z, s.theta)];
    for &(dx, dz, dth) in steps {
        s = s.step(&DeltaPose::new(dx, dz, dth));
        out.push(PoseMatrix::planar(s.x, s.z, s.theta));
    }
    out
}

fn step() -> impl Strategy<Value = (f64, f64, f64)> {
    (-0.5f64..0.5, -2.0f64..2.0, -0.3f64..0.3)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    geom::wrap_angle(a - b).abs()
}

proptest! {
    #[test]
    fn decompose_then_integrate_recovers_planar_poses(steps in proptest::collection::vec(step(), 1..200)) {
        let poses = planar_path(&steps);
        let deltas = geom::decompose_trajectory(&poses).unwrap();
        let states = geom::integrate_trajectory(PlanarState::origin(), &deltas);
        for (p, s) in poses.iter().zip(&states) {
            let want = p.planar_state();
            prop_assert!((want.x - s.x).abs() < 1e-6 && (want.z - s.z).abs() < 1e-6);
            prop_assert!(angle_diff(want.theta, s.theta) < 1e-6);
        }
    }

    #[test]
    fn self_delta_is_zero(x in -1e3f64..1e3, z in -1e3f64..1e3, th in -3.1f64..3.1) {
        let p = PoseMatrix::planar(x, z, th);
        prop_assert_eq!(geom::relative_delta(&p, &p).as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn relative_delta_is_frame_equivariant(
        a in (-50f64..50.0, -50f64..50.0, -3.1f64..3.1),
        b in (-50f64..50.0, -50f64..50.0, -3.1f64..3.1),
        g in (-50f64..50.0, -50f64..50.0, -3.1f64..3.1),
    ) {
        let pa = PoseMatrix::planar(a.0, a.1, a.2);
        let pb = PoseMatrix::planar(b.0, b.1, b.2);
        let t = PoseMatrix::planar(g.0, g.1, g.2);
        let d0 = geom::relative_delta(&pa, &pb);
        let d1 = geom::relative_delta(&t.compose(&pa), &t.compose(&pb));
        prop_assert!((d0.dx - d1.dx).abs() < 1e-9 && (d0.dz - d1.dz).abs() < 1e-9);
        prop_assert!(angle_diff(d0.dtheta, d1.dtheta) < 1e-9);
    }

    #[test]
    fn yaw_steps_wrap_into_half_open_range(th in -3.0f64..3.0, extra in 0.01f64..3.0) {
        let a = PoseMatrix::planar(0.0, 0.0, th);
        let b = PoseMatrix::planar(0.0, 0.0, th + std::f64::consts::PI + extra);
        let d = geom::relative_delta(&a, &b);
        prop_assert!(d.dtheta > -std::f64::consts::PI && d.dtheta <= std::f64::consts::PI);
    }
}

#[test]
fn yaw_step_past_pi() {
    let d = geom::relative_delta(
        &PoseMatrix::identity(),
        &PoseMatrix::planar(0.0, 0.0, std::f64::consts::PI + 0.1),
    );
    assert!((d.dtheta - (0.1 - std::f64::consts::PI)).abs() < 1e-12);
}

fn tiny_frames(n: usize, seed: u64) -> Vec<Raster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Raster::new(4, 4, 1, (0..16).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

fn corpus(lengths: &[usize], seed: u64) -> Vec<Sample> {
    let mut all = Vec::new();
    for (i, &n) in lengths.iter().enumerate() {
        let steps: Vec<_> = (0..n - 1).map(|k| (0.0, 1.0 + k as f64, 0.0)).collect();
        let poses = planar_path(&steps);
        all.extend(
            ingest::build_pairs(&tiny_frames(n, seed + i as u64), &poses, &format!("{i:02}"))
                .unwrap(),
        );
    }
    all
}

fn key(s: &Sample) -> (String, usize) {
    (s.seq_id.clone(), s.frame_idx)
}

proptest! {
    #[test]
    fn build_pairs_keeps_temporal_order(n in 2usize..30) {
        let s = corpus(&[n], 0);
        prop_assert_eq!(s.len(), n - 1);
        for (i, w) in s.windows(2).enumerate() {
            prop_assert_eq!(w[0].frame_idx, i);
            prop_assert!(Arc::ptr_eq(&w[0].img_b, &w[1].img_a));
            prop_assert!(w[0].label.dz < w[1].label.dz);
        }
    }

    #[test]
    fn random_split_is_a_partition(
        lengths in proptest::collection::vec(3usize..20, 1..6),
        frac in 0.2f64..0.8,
        seed in 0u64..1000,
    ) {
        let all = corpus(&lengths, seed);
        let (tr, te) = ingest::split(&all, &SplitSpec::random(frac, seed)).unwrap();
        let mut keys: Vec<_> = tr.iter().chain(&te).map(key).collect();
        keys.sort();
        let mut want: Vec<_> = all.iter().map(key).collect();
        want.sort();
        prop_assert_eq!(keys, want);
    }

    #[test]
    fn holdout_never_straddles_a_sequence(lengths in proptest::collection::vec(3usize..10, 2..8), mask in any::<u8>()) {
        let all = corpus(&lengths, 1);
        let ids: Vec<String> = (0..lengths.len()).map(|i| format!("{i:02}")).collect();
        let (mut train_sequences, mut test_sequences) = (Vec::new(), Vec::new());
        for (i, id) in ids.iter().enumerate() {
            if mask >> (i % 8) & 1 == 1 { train_sequences.push(id.clone()) } else { test_sequences.push(id.clone()) }
        }
        prop_assume!(!train_sequences.is_empty() && !test_sequences.is_empty());
        let spec = SplitSpec::SequenceHoldout { train_sequences: train_sequences.clone(), test_sequences };
        let (tr, te) = ingest::split(&all, &spec).unwrap();
        prop_assert_eq!(tr.len() + te.len(), all.len());
        prop_assert!(tr.iter().all(|s| train_sequences.contains(&s.seq_id)));
        prop_assert!(te.iter().all(|s| !train_sequences.contains(&s.seq_id)));
    }

    #[test]
    fn warp_resize_stays_within_input_range(
        w in 1usize..20, h in 1usize..20, ow in 1usize..40, oh in 1usize..40, c in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo: u8 = rng.random_range(0..200);
        let data: Vec<u8> = (0..w * h * c).map(|_| rng.random_range(lo..=lo + 55)).collect();
        let img = Raster::new(w, h, c, data.clone()).unwrap();
        let out = ingest::warp_resize(&img, ow, oh).unwrap();
        let (mn, mx) = (*data.iter().min().unwrap(), *data.iter().max().unwrap());
        prop_assert!(out.data.iter().all(|&v| v >= mn && v <= mx));
    }
}

fn random_luma(w: usize, h: usize, seed: u64, range: (u8, u8)) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(
        w,
        h,
        1,
        (0..w * h)
            .map(|_| rng.random_range(range.0..=range.1))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn brightness_shift_keeps_corners(seed in any::<u64>(), shift in 1u8..60, t in 5u8..60, nms in any::<bool>()) {
        let img = random_luma(24, 24, seed, (0, 195));
        let mut shifted = img.clone();
        shifted.data.iter_mut().for_each(|v| *v += shift);
        let cfg = FastConfig { threshold: t, arc_length: 9, nms };
        prop_assert_eq!(fastdet::detect(&img, &cfg).unwrap(), fastdet::detect(&shifted, &cfg).unwrap());
    }

    #[test]
    fn raising_threshold_never_adds_corners(seed in any::<u64>(), t in 1u8..100, dt in 1u8..50, arc in 9usize..=12) {
        let img = random_luma(24, 24, seed, (0, 255));
        let at = |t: u8| -> Vec<(usize, usize)> {
            let cfg = FastConfig { threshold: t, arc_length: arc, nms: false };
            fastdet::detect(&img, &cfg).unwrap().iter().map(|c| (c.x, c.y)).collect()
        };
        let low = at(t);
        prop_assert!(at(t.saturating_add(dt)).iter().all(|c| low.contains(c)));
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut layer = Layer::<f64>::from_spec(&LayerSpec::Dropout { p: 0.5 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_vec(&[1, 50], (0..50).map(|i| 0.5 + i as f64 / 50.0).collect()).unwrap();
    let inference: f64 = layer
        .forward(x.clone(), false, &mut rng)
        .unwrap()
        .data()
        .iter()
        .sum::<f64>()
        / 50.0;
    let masks = 10_000;
    let mut total = 0.0;
    for _ in 0..masks {
        total += layer
            .forward(x.clone(), true, &mut rng)
            .unwrap()
            .data()
            .iter()
            .sum::<f64>()
            / 50.0;
    }
    let train_mean = total / masks as f64;
    assert!(
        (train_mean - inference).abs() / inference < 0.02,
        "{train_mean} vs {inference}"
    );
}

proptest! {
    #[test]
    fn flatten_and_concat_are_bijections(n in 1usize..4, c1 in 1usize..4, c2 in 1usize..4, hw in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::<f64>::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let a = rand_t(&[n, c1, hw, hw]);
        let b = rand_t(&[n, c2, hw, hw]);

        let mut flat = Layer::<f64>::from_spec(&LayerSpec::Flatten).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y = flat.forward(a.clone(), true, &mut r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c1 * hw * hw][..]);
        prop_assert_eq!(y.data(), a.data());
        let back = flat.backward(&y).unwrap();
        prop_assert_eq!(back.shape(), a.shape());
        prop_assert_eq!(back.data(), a.data());

        let cat = concat(&a, &b, 1).unwrap();
        prop_assert_eq!(cat.len(), a.len() + b.len());
        let (da, db) = concat_backward(&cat, 1, c1).unwrap();
        prop_assert_eq!(da.data(), a.data());
        prop_assert_eq!(db.data(), b.data());
    }
}
