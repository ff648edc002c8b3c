//! Central finite-difference oracles, in f64.

use deepvo::net::{ConvInit, ModelGraph, NetConfig, StreamGeometry};
use deepvo::nncore::ops::{concat, concat_backward};
use deepvo::nncore::{euclidean_loss, Layer, LayerSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const DRAWS: u64 = 20;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values spread at least `4 * EPS` apart and away from zero, so neither
/// ReLU nor max pooling changes its branch inside the difference stencil.
fn spread_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.01)
        .collect();
    vals.shuffle(rng);
    Tensor::from_vec(shape, vals).unwrap()
}

fn conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    }
}

/// Every layer kind with input shapes that exercise padding, striding and
/// overlapping windows. The flag asks for tie-free inputs.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>, bool)> {
    vec![
        (conv(2, 3, 3, 1, 1), vec![2, 2, 5, 5], false),
        (conv(3, 2, 5, 2, 0), vec![1, 3, 9, 9], false),
        (conv(2, 2, 3, 2, 1), vec![2, 2, 6, 7], false),
        (conv(1, 2, 11, 4, 0), vec![1, 1, 15, 15], false),
        (
            LayerSpec::MaxPool {
                kernel: 3,
                stride: 2,
            },
            vec![2, 2, 7, 7],
            true,
        ),
        (
            LayerSpec::MaxPool {
                kernel: 3,
                stride: 3,
            },
            vec![1, 3, 9, 9],
            true,
        ),
        (
            LayerSpec::MaxPool {
                kernel: 2,
                stride: 1,
            },
            vec![2, 1, 4, 5],
            true,
        ),
        (LayerSpec::ReLU, vec![3, 2, 3, 3], true),
        (LayerSpec::Dropout { p: 0.5 }, vec![4, 10], false),
        (
            LayerSpec::FullyConnected {
                in_features: 7,
                out_features: 5,
            },
            vec![3, 7],
            false,
        ),
        (LayerSpec::Flatten, vec![2, 3, 2, 2], false),
    ]
}

/// Worst relative error of `d(sum(layer(x) * r))` w.r.t. the input and
/// every parameter.
pub fn layer_worst(spec: &LayerSpec, in_shape: &[usize], spread: bool, draw: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
    let mut layer = Layer::<f64>::from_spec(spec).unwrap();
    for (_, p) in layer.params_mut() {
        let r = random_tensor(p.shape(), &mut rng);
        p.data_mut().copy_from_slice(r.data());
    }
    let x = if spread {
        spread_tensor(in_shape, &mut rng)
    } else {
        random_tensor(in_shape, &mut rng)
    };
    let mask_seed = rng.random::<u64>();
    let objective = |layer: &mut Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>| -> f64 {
        let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
        let y = layer.forward(x.clone(), true, &mut mrng).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
    let y = layer.forward(x.clone(), true, &mut mrng).unwrap();
    let r = random_tensor(y.shape(), &mut rng);
    let dx = layer.backward(&r).unwrap();
    let param_grads: Vec<Vec<f64>> = layer
        .params()
        .iter()
        .map(|(_, p)| p.grad().unwrap().to_vec())
        .collect();

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let num = (objective(&mut layer, &xp, &r) - objective(&mut layer, &xm, &r)) / (2.0 * EPS);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    for (pi, grads) in param_grads.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let orig = layer.params()[pi].1.data()[j];
            layer.params_mut()[pi].1.data_mut()[j] = orig + EPS;
            let fp = objective(&mut layer, &x, &r);
            layer.params_mut()[pi].1.data_mut()[j] = orig - EPS;
            let fm = objective(&mut layer, &x, &r);
            layer.params_mut()[pi].1.data_mut()[j] = orig;
            worst = worst.max(rel_err(g, (fp - fm) / (2.0 * EPS)));
        }
    }
    worst
}

pub fn concat_worst(draw: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let cases: [(&[usize], &[usize], usize); 3] = [
        (&[2, 3], &[2, 5], 1),
        (&[2, 2, 3, 3], &[2, 1, 3, 3], 1),
        (&[1, 4], &[2, 4], 0),
    ];
    let mut worst = 0.0f64;
    for (sa, sb, axis) in cases {
        let a = random_tensor(sa, &mut rng);
        let b = random_tensor(sb, &mut rng);
        let y = concat(&a, &b, axis).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        let (da, db) = concat_backward(&r, axis, sa[axis]).unwrap();
        let f = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = concat(a, b, axis).unwrap();
            y.data().iter().zip(r.data()).map(|(p, q)| p * q).sum()
        };
        for (which, grad) in [(0, &da), (1, &db)] {
            for i in 0..grad.len() {
                let (mut ap, mut bp, mut am, mut bm) = (a.clone(), b.clone(), a.clone(), b.clone());
                if which == 0 {
                    ap.data_mut()[i] += EPS;
                    am.data_mut()[i] -= EPS;
                } else {
                    bp.data_mut()[i] += EPS;
                    bm.data_mut()[i] -= EPS;
                }
                let num = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * EPS);
                worst = worst.max(rel_err(grad.data()[i], num));
            }
        }
    }
    worst
}

pub fn loss_worst(draw: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let pred = random_tensor(&[4, 3], &mut rng);
    let label = random_tensor(&[4, 3], &mut rng);
    let (_, grad) = euclidean_loss(&pred, &label).unwrap();
    let mut worst = 0.0f64;
    for i in 0..pred.len() {
        let mut p = pred.clone();
        p.data_mut()[i] += EPS;
        let fp = euclidean_loss(&p, &label).unwrap().0;
        p.data_mut()[i] -= 2.0 * EPS;
        let fm = euclidean_loss(&p, &label).unwrap().0;
        worst = worst.max(rel_err(grad.data()[i], (fp - fm) / (2.0 * EPS)));
    }
    worst
}

pub fn tiny_config() -> NetConfig {
    let mut cfg = NetConfig::two_stream(0.125);
    cfg.geometry = StreamGeometry::TINY;
    cfg.input_size = 8;
    cfg.conv_init = ConvInit::FanIn;
    cfg
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GraphCheck {
    pub checked: usize,
    /// Coordinates whose oracle needed a step below `EPS`.
    pub shrunk: usize,
    /// Coordinates with no step at which the h and h/2 estimates agree.
    pub unresolved: usize,
    pub worst: f64,
}

/// Whole-graph loss gradient against finite differences on a sample of
/// coordinates from every parameter tensor. A deep ReLU/max-pool network is
/// only piecewise smooth, and a stencil straddling a kink is not a valid
/// oracle. The step therefore starts at EPS and is shrunk until the h and
/// h/2 estimates agree.
pub fn full_graph(draws: u64, per_tensor: usize) -> GraphCheck {
    const STEPS: [f64; 4] = [EPS, 1e-4, 1e-5, 1e-6];
    let cfg = tiny_config();
    let mut out = GraphCheck::default();
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + draw);
        let mut g = ModelGraph::<f64>::build(&cfg, draw).unwrap();
        let a = random_tensor(&[2, 3, 8, 8], &mut rng);
        let b = random_tensor(&[2, 3, 8, 8], &mut rng);
        let y = random_tensor(&[2, 3], &mut rng);
        let mask_seed = rng.random::<u64>();
        let loss_of = |g: &mut ModelGraph<f64>| -> f64 {
            let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
            let pred = g.forward(&a, &b, true, &mut m).unwrap();
            euclidean_loss(&pred, &y).unwrap().0
        };
        g.zero_grad();
        let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
        let pred = g.forward(&a, &b, true, &mut m).unwrap();
        let (_, grad) = euclidean_loss(&pred, &y).unwrap();
        g.backward(&grad).unwrap();
        let analytic: Vec<Vec<f64>> = g
            .params()
            .into_iter()
            .map(|(_, p)| p.grad().unwrap().to_vec())
            .collect();
        for (pi, grads) in analytic.iter().enumerate() {
            let diff = |g: &mut ModelGraph<f64>, j: usize, h: f64| -> f64 {
                let orig = g.params()[pi].1.data()[j];
                g.params_mut()[pi].1.data_mut()[j] = orig + h;
                let fp = loss_of(g);
                g.params_mut()[pi].1.data_mut()[j] = orig - h;
                let fm = loss_of(g);
                g.params_mut()[pi].1.data_mut()[j] = orig;
                (fp - fm) / (2.0 * h)
            };
            for _ in 0..per_tensor.min(grads.len()) {
                let j = rng.random_range(0..grads.len());
                let mut oracle = None;
                for (k, &h) in STEPS.iter().enumerate() {
                    let num = diff(&mut g, j, h);
                    if rel_err(num, diff(&mut g, j, h / 2.0)) < TOL {
                        oracle = Some(num);
                        out.shrunk += (k > 0) as usize;
                        break;
                    }
                }
                match oracle {
                    Some(num) => {
                        out.worst = out.worst.max(rel_err(grads[j], num));
                        out.checked += 1;
                    }
                    None => out.unresolved += 1,
                }
            }
        }
    }
    out
}
