use super::{NnError, Real, Result, Tensor};

/// SGD with momentum, L2 weight decay and step learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `decay_interval` iterations.
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_factor: 0.1,
            decay_interval: 10_000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(NnError::InvalidSpec(format!(
                "bad optimizer config {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.decay_interval == 0 {
            return self.lr;
        }
        self.lr
            * self
                .decay_factor
                .powi((iteration / self.decay_interval) as i32)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T: Real = f32> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// `v <- momentum*v - lr*(g + weight_decay*w); w <- w + v`, using each
/// parameter's own gradient buffer.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    state: &mut SgdState<T>,
    cfg: &SgdConfig,
    iteration: u64,
) -> Result<()> {
    if state.velocity.is_empty() && !params.is_empty() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameters but {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    let lr = cfg.lr_at(iteration);
    let mom = T::from_f64_lossy(cfg.momentum);
    let lr_t = T::from_f64_lossy(lr);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (i, (p, v)) in params.iter_mut().zip(state.velocity.iter_mut()).enumerate() {
        if v.len() != p.len() {
            return Err(NnError::ShapeMismatch(format!(
                "velocity {i} has {} entries for {} weights",
                v.len(),
                p.len()
            )));
        }
        if p.grad().is_none() {
            return Err(NnError::MissingGrad(format!(
                "parameter {i} has no gradient"
            )));
        }
        let (w, g) = p.data_and_grad_mut();
        for ((w, g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = mom * *v - lr_t * (*g + wd * *w);
            *w += *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::from_vec(&[1], vec![w]).unwrap();
        t.grad_mut()[0] = g;
        t
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            ..Default::default()
        };
        let mut w = scalar(1.0, 1.0);
        let mut st = SgdState::default();
        sgd_step(&mut [&mut w], &mut st, &cfg, 0).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            ..Default::default()
        };
        let mut w = scalar(1.0, 1.0);
        let mut st = SgdState::default();
        sgd_step(&mut [&mut w], &mut st, &cfg, 0).unwrap();
        // v1 = -0.1, w1 = 0.9
        w.grad_mut()[0] = 1.0;
        sgd_step(&mut [&mut w], &mut st, &cfg, 1).unwrap();
        // v2 = 0.9 * -0.1 - 0.1 = -0.19, w2 = 0.71
        assert!((st.velocity[0][0] + 0.19).abs() < 1e-15);
        assert!((w.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = scalar(0.3, 0.0);
        let mut st = SgdState::default();
        sgd_step(&mut [&mut w], &mut st, &SgdConfig::default(), 0).unwrap();
        assert_eq!(w.data()[0], 0.3);
    }

    #[test]
    fn weight_decay_and_schedule() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            decay_factor: 0.1,
            decay_interval: 10,
        };
        assert!((cfg.lr_at(9) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        let mut w = scalar(2.0, 0.0);
        let mut st = SgdState::default();
        sgd_step(&mut [&mut w], &mut st, &cfg, 0).unwrap();
        assert!((w.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_grad() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        let mut st = SgdState::default();
        assert!(matches!(
            sgd_step(&mut [&mut w], &mut st, &SgdConfig::default(), 0),
            Err(NnError::MissingGrad(_))
        ));
    }
}
