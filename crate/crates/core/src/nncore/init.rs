use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Tensor};

/// Fills with `N(0, std^2)`.
pub fn init_gaussian<T: Real>(t: &mut Tensor<T>, std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in t.data_mut() {
        *v = T::from_f64_lossy(dist.sample(rng));
    }
}

/// Fan-in and fan-out of a weight tensor laid out `(out, in, ...)`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = fans(shape);
    (6.0 / (fi + fo) as f64).sqrt()
}

/// Fills uniformly in `±sqrt(6 / (fan_in + fan_out))`.
pub fn init_xavier<T: Real>(t: &mut Tensor<T>, rng: &mut impl Rng) {
    let a = xavier_bound(t.shape());
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    for v in t.data_mut() {
        *v = T::from_f64_lossy(dist.sample(rng));
    }
}
