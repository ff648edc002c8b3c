use rand::Rng;

use super::ops;
use super::{NnError, Real, Result, Tensor};

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    ReLU,
    Dropout {
        p: f64,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Concat {
        axis: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad(format!("conv parameters must be positive: {self:?}"));
                }
                if padding >= kernel {
                    return bad(format!("conv padding {padding} >= kernel {kernel}"));
                }
            }
            LayerSpec::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return bad(format!("pool parameters must be positive: {self:?}"));
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("dropout probability {p} outside [0, 1)"));
                }
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad(format!("fc sizes must be positive: {self:?}"));
                }
            }
            LayerSpec::ReLU | LayerSpec::Concat { .. } | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: Tensor::param(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::param(&[out_channels]),
            stride,
            padding,
            input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Tensor::param(&[out_features, in_features]),
            bias: Tensor::param(&[out_features]),
            input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Real = f32> {
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Dropout<T: Real = f32> {
    pub p: f64,
    mask: Option<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Vec<usize>,
}

/// A layer instance with its parameters and the activations its backward
/// pass needs.
#[derive(Debug, Clone)]
pub enum Layer<T: Real = f32> {
    Conv2d(Conv2d<T>),
    MaxPool(MaxPool2d),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
    Linear(Linear<T>),
    Flatten(Flatten),
}

impl<T: Real> Layer<T> {
    pub fn from_spec(spec: &LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            )),
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(MaxPool2d {
                kernel,
                stride,
                argmax: Vec::new(),
                input_shape: Vec::new(),
            }),
            LayerSpec::ReLU => Layer::Relu(Relu { input: None }),
            LayerSpec::Dropout { p } => Layer::Dropout(Dropout { p, mask: None }),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(in_features, out_features)),
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
            LayerSpec::Concat { .. } => {
                return Err(NnError::InvalidSpec(
                    "concat joins two inputs and is not a single-input layer".into(),
                ))
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::MaxPool(_) => "pool",
            Layer::Relu(_) => "relu",
            Layer::Dropout(_) => "dropout",
            Layer::Linear(_) => "fc",
            Layer::Flatten(_) => "flatten",
        }
    }

    /// Runs the layer and caches what [`Layer::backward`] needs. Dropout is
    /// active only when `train` is set.
    pub fn forward(&mut self, x: Tensor<T>, train: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => {
                let y = ops::conv2d_forward(&x, &l.weight, &l.bias, l.stride, l.padding)?;
                l.input = Some(x);
                Ok(y)
            }
            Layer::MaxPool(l) => {
                let (y, arg) = ops::maxpool_forward(&x, l.kernel, l.stride)?;
                l.argmax = arg;
                l.input_shape = x.shape().to_vec();
                Ok(y)
            }
            Layer::Relu(l) => {
                let y = ops::relu_forward(&x);
                l.input = Some(x);
                Ok(y)
            }
            Layer::Dropout(l) => {
                if train && l.p > 0.0 {
                    let (y, mask) = ops::dropout_forward(&x, l.p, rng);
                    l.mask = Some(mask);
                    Ok(y)
                } else {
                    l.mask = None;
                    Ok(x)
                }
            }
            Layer::Linear(l) => {
                let y = ops::fc_forward(&x, &l.weight, &l.bias)?;
                l.input = Some(x);
                Ok(y)
            }
            Layer::Flatten(l) => {
                l.input_shape = x.shape().to_vec();
                ops::flatten(x)
            }
        }
    }

    /// Propagates `grad` to the layer input and accumulates parameter gradients.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let missing = |k: &str| NnError::MissingGrad(format!("{k} backward before forward"));
        match self {
            Layer::Conv2d(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("conv"))?;
                let (dx, dw, db) = ops::conv2d_backward(x, &l.weight, grad, l.stride, l.padding)?;
                accumulate(&mut l.weight, &dw);
                accumulate(&mut l.bias, &db);
                Ok(dx)
            }
            Layer::MaxPool(l) => {
                if l.input_shape.is_empty() {
                    return Err(missing("pool"));
                }
                ops::maxpool_backward(grad, &l.argmax, &l.input_shape)
            }
            Layer::Relu(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("relu"))?;
                ops::relu_backward(x, grad)
            }
            Layer::Dropout(l) => match &l.mask {
                Some(m) => ops::dropout_backward(grad, m),
                None => Ok(grad.clone()),
            },
            Layer::Linear(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("fc"))?;
                let (dx, dw, db) = ops::fc_backward(x, &l.weight, grad)?;
                accumulate(&mut l.weight, &dw);
                accumulate(&mut l.bias, &db);
                Ok(dx)
            }
            Layer::Flatten(l) => {
                if l.input_shape.is_empty() {
                    return Err(missing("flatten"));
                }
                grad.clone().reshape(&l.input_shape)
            }
        }
    }

    /// Named parameters (`weight`, `bias`) of this layer.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => Vec::new(),
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.input = None,
            Layer::Linear(l) => l.input = None,
            Layer::Relu(l) => l.input = None,
            Layer::Dropout(l) => l.mask = None,
            Layer::MaxPool(l) => {
                l.argmax = Vec::new();
                l.input_shape.clear();
            }
            Layer::Flatten(l) => l.input_shape.clear(),
        }
    }
}

fn accumulate<T: Real>(param: &mut Tensor<T>, delta: &Tensor<T>) {
    for (g, d) in param.grad_mut().iter_mut().zip(delta.data()) {
        *g += *d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_validation() {
        let conv = |padding| LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding,
        };
        assert!(conv(1).validate().is_ok());
        assert!(conv(3).validate().is_err());
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::MaxPool {
            kernel: 0,
            stride: 1
        }
        .validate()
        .is_err());
        assert!(Layer::<f32>::from_spec(&LayerSpec::Concat { axis: 1 }).is_err());
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Layer::<f64>::from_spec(&LayerSpec::Dropout { p: 0.5 }).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(l.forward(x.clone(), false, &mut rng).unwrap(), x);
        let y = l.forward(x.clone(), true, &mut rng).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut l = Layer::<f64>::from_spec(&LayerSpec::FullyConnected {
            in_features: 2,
            out_features: 2,
        })
        .unwrap();
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(l.backward(&g), Err(NnError::MissingGrad(_))));
    }
}
