//! Two-stream odometry networks assembled from [`crate::nncore`] layers.
//!
//! Each input frame runs through its own convolutional cascade; the flattened
//! stream features are concatenated and regressed to `(dx, dz, dtheta)` by a
//! tapering stack of fully connected layers. The pretrained-head variant
//! instead takes two externally computed activation tensors, concatenates them
//! along channels and learns one convolution plus four dense layers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nncore::ops::{concat, concat_backward, out_extent};
use crate::nncore::{
    init_gaussian, init_xavier, Checkpoint, Layer, LayerSpec, NnError, Real, Tensor,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("channel mismatch: network expects {expected} channels, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    TwoStreamRgb,
    TwoStreamRgbFast,
    PretrainedHead,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TwoStreamRgb => "two-stream-rgb",
            Variant::TwoStreamRgbFast => "two-stream-rgb-fast",
            Variant::PretrainedHead => "pretrained-head",
        })
    }
}

impl FromStr for Variant {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-stream-rgb" => Ok(Variant::TwoStreamRgb),
            "two-stream-rgb-fast" => Ok(Variant::TwoStreamRgbFast),
            "pretrained-head" => Ok(Variant::PretrainedHead),
            _ => Err(NetError::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

/// Kernel, stride and padding of one convolution; the channel count is given
/// at full width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolShape {
    pub kernel: usize,
    pub stride: usize,
}

/// Per-stream cascade: conv1, pool, conv2, pool, conv3, conv4, conv5, pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamGeometry {
    pub convs: [ConvShape; 5],
    pub pools: [PoolShape; 3],
}

const fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvShape {
    ConvShape {
        channels,
        kernel,
        stride,
        padding,
    }
}

const fn pool(kernel: usize, stride: usize) -> PoolShape {
    PoolShape { kernel, stride }
}

impl StreamGeometry {
    /// AlexNet stack for 256×256 input with a 3/3 final pool:
    /// 62 → 30 → 30 → 14 → 14 → 14 → 14 → 4, so 256·4·4 = 4096 per stream.
    pub const ALEXNET: StreamGeometry = StreamGeometry {
        convs: [
            conv(96, 11, 4, 0),
            conv(256, 5, 1, 2),
            conv(384, 3, 1, 1),
            conv(384, 3, 1, 1),
            conv(256, 3, 1, 1),
        ],
        pools: [pool(3, 2), pool(3, 2), pool(3, 3)],
    };

    /// Same layer pattern with shrunk first kernel for 64×64 input:
    /// 30 → 14 → 14 → 6 → 6 → 6 → 6 → 4.
    pub const COMPACT: StreamGeometry = StreamGeometry {
        convs: [
            conv(96, 5, 2, 0),
            conv(256, 5, 1, 2),
            conv(384, 3, 1, 1),
            conv(384, 3, 1, 1),
            conv(256, 3, 1, 1),
        ],
        pools: [pool(3, 2), pool(3, 2), pool(3, 1)],
    };

    /// Shrunk strides for 8×8 input (gradient checks): 6 → 3 → 3 → 2 → 2 → 2 → 2 → 1.
    pub const TINY: StreamGeometry = StreamGeometry {
        convs: [
            conv(96, 3, 1, 0),
            conv(256, 3, 1, 1),
            conv(384, 3, 1, 1),
            conv(384, 3, 1, 1),
            conv(256, 3, 1, 1),
        ],
        pools: [pool(2, 2), pool(2, 1), pool(2, 2)],
    };

    pub fn name(&self) -> Option<&'static str> {
        if *self == Self::ALEXNET {
            Some("alexnet")
        } else if *self == Self::COMPACT {
            Some("compact")
        } else if *self == Self::TINY {
            Some("tiny")
        } else {
            None
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "alexnet" => Some(Self::ALEXNET),
            "compact" => Some(Self::COMPACT),
            "tiny" => Some(Self::TINY),
            _ => None,
        }
    }
}

/// Standard deviation of the Gaussian used for convolution weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvInit {
    Fixed(f64),
    /// `sqrt(2 / fan_in)` per layer.
    FanIn,
}

impl fmt::Display for ConvInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvInit::Fixed(s) => write!(f, "{s}"),
            ConvInit::FanIn => f.write_str("fan-in"),
        }
    }
}

impl FromStr for ConvInit {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "fan-in" {
            return Ok(ConvInit::FanIn);
        }
        s.parse()
            .map(ConvInit::Fixed)
            .map_err(|_| NetError::InvalidConfig(format!("bad conv init {s:?}")))
    }
}

/// Dense head widths at full scale: 8192 → 4096 → 1024 → 128 → 3.
pub const HEAD_WIDTHS: [usize; 3] = [4096, 1024, 128];
pub const OUTPUT_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub variant: Variant,
    /// Image channels per frame (3, or 4 with the corner channel).
    pub input_channels: usize,
    /// Scales every channel and unit count; each width is rounded to at least 1.
    pub width_multiplier: f64,
    pub dropout_p: f64,
    /// Square input edge length for the two-stream variants.
    pub input_size: usize,
    pub geometry: StreamGeometry,
    /// Run both frames through one set of stream weights.
    pub shared_streams: bool,
    /// `(C, H, W)` of each activation input for the pretrained head.
    pub activation_shape: [usize; 3],
    pub conv_init: ConvInit,
    /// Multiplies the Xavier draw of the output layer's weights.
    pub output_init_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TwoStreamRgb,
            input_channels: 3,
            width_multiplier: 1.0,
            dropout_p: 0.5,
            input_size: 256,
            geometry: StreamGeometry::ALEXNET,
            shared_streams: false,
            activation_shape: [256, 6, 6],
            conv_init: ConvInit::Fixed(0.01),
            output_init_gain: 1.0,
        }
    }
}

impl NetConfig {
    pub fn two_stream(width_multiplier: f64) -> Self {
        Self {
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn two_stream_fast(width_multiplier: f64) -> Self {
        Self {
            variant: Variant::TwoStreamRgbFast,
            input_channels: 4,
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn pretrained_head(width_multiplier: f64) -> Self {
        Self {
            variant: Variant::PretrainedHead,
            width_multiplier,
            ..Self::default()
        }
    }

    /// `max(1, round(full * width_multiplier))`.
    pub fn scaled(&self, full: usize) -> usize {
        ((full as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        match self.variant {
            Variant::TwoStreamRgb if self.input_channels != 3 => {
                return bad(format!(
                    "rgb variant needs 3 channels, got {}",
                    self.input_channels
                ))
            }
            Variant::TwoStreamRgbFast if self.input_channels != 4 => {
                return bad(format!(
                    "fast variant needs 4 channels, got {}",
                    self.input_channels
                ))
            }
            Variant::PretrainedHead if self.activation_shape.iter().any(|&d| d == 0) => {
                return bad(format!(
                    "activation shape {:?} has a zero",
                    self.activation_shape
                ))
            }
            _ => {}
        }
        if let ConvInit::Fixed(s) = self.conv_init {
            if !(s > 0.0) {
                return bad(format!("conv init std {s} must be positive"));
            }
        }
        if !(self.output_init_gain > 0.0 && self.output_init_gain.is_finite()) {
            return bad(format!(
                "output init gain {} must be positive",
                self.output_init_gain
            ));
        }
        Ok(())
    }

    /// Shape of one network input (excluding batch).
    pub fn input_shape(&self) -> [usize; 3] {
        match self.variant {
            Variant::PretrainedHead => self.activation_shape,
            _ => [self.input_channels, self.input_size, self.input_size],
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let g = self
            .geometry
            .name()
            .map(str::to_string)
            .unwrap_or_else(|| "custom".into());
        let a = self.activation_shape;
        vec![
            ("net.variant".into(), self.variant.to_string()),
            ("net.input_channels".into(), self.input_channels.to_string()),
            (
                "net.width_multiplier".into(),
                self.width_multiplier.to_string(),
            ),
            ("net.dropout_p".into(), self.dropout_p.to_string()),
            ("net.input_size".into(), self.input_size.to_string()),
            ("net.geometry".into(), g),
            ("net.shared_streams".into(), self.shared_streams.to_string()),
            (
                "net.activation_shape".into(),
                format!("{}x{}x{}", a[0], a[1], a[2]),
            ),
            ("net.conv_init".into(), self.conv_init.to_string()),
            (
                "net.output_init_gain".into(),
                self.output_init_gain.to_string(),
            ),
        ]
    }

    /// Reads the keys written by [`NetConfig::to_kv`]; absent keys keep defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = NetConfig::default();
        let get = |k: &str| map.get(&format!("net.{k}")).map(String::as_str);
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| NetError::InvalidConfig(format!("bad value {v:?} for {k}")))
        };
        if let Some(v) = get("variant") {
            cfg.variant = v.parse()?;
            if cfg.variant == Variant::TwoStreamRgbFast {
                cfg.input_channels = 4;
            }
        }
        if let Some(v) = get("input_channels") {
            cfg.input_channels = num("input_channels", v)? as usize;
        }
        if let Some(v) = get("width_multiplier") {
            cfg.width_multiplier = num("width_multiplier", v)?;
        }
        if let Some(v) = get("dropout_p") {
            cfg.dropout_p = num("dropout_p", v)?;
        }
        if let Some(v) = get("input_size") {
            cfg.input_size = num("input_size", v)? as usize;
        }
        if let Some(v) = get("geometry") {
            cfg.geometry = StreamGeometry::by_name(v)
                .ok_or_else(|| NetError::InvalidConfig(format!("unknown geometry {v:?}")))?;
        }
        if let Some(v) = get("shared_streams") {
            cfg.shared_streams = v == "true";
        }
        if let Some(v) = get("activation_shape") {
            let dims: Vec<usize> = v.split('x').filter_map(|d| d.parse().ok()).collect();
            if dims.len() != 3 {
                return Err(NetError::InvalidConfig(format!(
                    "bad activation shape {v:?}"
                )));
            }
            cfg.activation_shape = [dims[0], dims[1], dims[2]];
        }
        if let Some(v) = get("conv_init") {
            cfg.conv_init = v.parse()?;
        }
        if let Some(v) = get("output_init_gain") {
            cfg.output_init_gain = num("output_init_gain", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plain `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NetError::InvalidConfig(format!("bad config line {line:?}")))?;
            let k = k.trim();
            let k = if k.starts_with("net.") {
                k.to_string()
            } else {
                format!("net.{k}")
            };
            map.insert(k, v.trim().to_string());
        }
        Self::from_kv(&map)
    }
}

/// Layer sizes of a built graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionLedger {
    /// `(layer name, output shape excluding batch)` for stream A, merge and head.
    pub layers: Vec<(String, Vec<usize>)>,
    pub stream_flatten: usize,
    pub merged: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
struct NamedLayer<T: Real> {
    name: String,
    spec: LayerSpec,
    layer: Layer<T>,
}

/// Output shape of `spec` for a per-sample input shape.
fn infer_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let bad = || NetError::ShapeMismatch(format!("{spec:?} cannot take input {input:?}"));
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let [c, h, w] = *input else { return Err(bad()) };
            if c != in_channels {
                return Err(bad());
            }
            let ho = out_extent(h, kernel, stride, padding).ok_or_else(bad)?;
            let wo = out_extent(w, kernel, stride, padding).ok_or_else(bad)?;
            Ok(vec![out_channels, ho, wo])
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let [c, h, w] = *input else { return Err(bad()) };
            let ho = out_extent(h, kernel, stride, 0).ok_or_else(bad)?;
            let wo = out_extent(w, kernel, stride, 0).ok_or_else(bad)?;
            Ok(vec![c, ho, wo])
        }
        LayerSpec::ReLU | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => {
            if input != [in_features] {
                return Err(bad());
            }
            Ok(vec![out_features])
        }
        LayerSpec::Concat { .. } => Err(bad()),
    }
}

fn stream_specs(cfg: &NetConfig) -> Vec<(String, LayerSpec)> {
    let g = &cfg.geometry;
    let mut out = Vec::new();
    let mut in_ch = cfg.input_channels;
    for (i, c) in g.convs.iter().enumerate() {
        let ch = cfg.scaled(c.channels);
        out.push((
            format!("conv{}", i + 1),
            LayerSpec::Conv2d {
                in_channels: in_ch,
                out_channels: ch,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
        ));
        out.push((format!("relu{}", i + 1), LayerSpec::ReLU));
        let pool_slot = match i {
            0 => Some(0),
            1 => Some(1),
            4 => Some(2),
            _ => None,
        };
        if let Some(p) = pool_slot {
            let p = g.pools[p];
            out.push((
                format!("pool{}", i + 1),
                LayerSpec::MaxPool {
                    kernel: p.kernel,
                    stride: p.stride,
                },
            ));
        }
        in_ch = ch;
    }
    out.push(("flatten".into(), LayerSpec::Flatten));
    out
}

fn dense_specs(cfg: &NetConfig, merged: usize) -> Vec<(String, LayerSpec)> {
    let widths = HEAD_WIDTHS.map(|w| cfg.scaled(w));
    let mut out = Vec::new();
    let mut fin = merged;
    for (i, &w) in widths.iter().enumerate() {
        out.push((
            format!("fc{}", i + 1),
            LayerSpec::FullyConnected {
                in_features: fin,
                out_features: w,
            },
        ));
        out.push((format!("relu_fc{}", i + 1), LayerSpec::ReLU));
        if i < 2 {
            out.push((
                format!("drop{}", i + 1),
                LayerSpec::Dropout { p: cfg.dropout_p },
            ));
        }
        fin = w;
    }
    out.push((
        "fc4".into(),
        LayerSpec::FullyConnected {
            in_features: fin,
            out_features: OUTPUT_DIM,
        },
    ));
    out
}

/// The assembled network: two input streams, a merge, and a regression head.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Real = f32> {
    cfg: NetConfig,
    stream_a: Vec<NamedLayer<T>>,
    stream_b: Vec<NamedLayer<T>>,
    head: Vec<NamedLayer<T>>,
    /// Concatenation axis (1 for both features and channels in NCHW / NF).
    merge_axis: usize,
    /// Extent of stream A's output along the merge axis.
    merge_split: usize,
    ledger: DimensionLedger,
    batch: usize,
}

fn instantiate<T: Real>(specs: Vec<(String, LayerSpec)>) -> Result<Vec<NamedLayer<T>>> {
    specs
        .into_iter()
        .map(|(name, spec)| {
            Ok(NamedLayer {
                layer: Layer::from_spec(&spec)?,
                name,
                spec,
            })
        })
        .collect()
}

impl<T: Real> ModelGraph<T> {
    /// Builds and initializes a network. Convolution weights are Gaussian,
    /// dense weights Xavier-uniform, biases zero.
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ledger = Vec::new();
        let (stream_a, stream_b, head, merge_split, stream_flatten, merged);
        match cfg.variant {
            Variant::TwoStreamRgb | Variant::TwoStreamRgbFast => {
                let specs = stream_specs(cfg);
                let mut shape = cfg.input_shape().to_vec();
                for (name, spec) in &specs {
                    shape = infer_shape(spec, &shape)?;
                    ledger.push((format!("stream.{name}"), shape.clone()));
                }
                stream_flatten = shape[0];
                merged = 2 * stream_flatten;
                ledger.push(("merge".into(), vec![merged]));
                let head_specs = dense_specs(cfg, merged);
                for (name, spec) in &head_specs {
                    shape = infer_shape(spec, &shape_for_head(&ledger))?;
                    ledger.push((format!("head.{name}"), shape.clone()));
                }
                stream_a = instantiate(specs.clone())?;
                stream_b = if cfg.shared_streams {
                    Vec::new()
                } else {
                    instantiate(specs)?
                };
                head = instantiate(head_specs)?;
                merge_split = stream_flatten;
            }
            Variant::PretrainedHead => {
                let [c, h, w] = cfg.activation_shape;
                stream_flatten = c * h * w;
                ledger.push(("merge".into(), vec![2 * c, h, w]));
                let conv_out = cfg.scaled(256);
                let mut specs = vec![
                    (
                        "conv1".to_string(),
                        LayerSpec::Conv2d {
                            in_channels: 2 * c,
                            out_channels: conv_out,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                        },
                    ),
                    ("relu1".to_string(), LayerSpec::ReLU),
                    ("flatten".to_string(), LayerSpec::Flatten),
                ];
                specs.extend(dense_specs(cfg, conv_out * h * w));
                let mut shape = vec![2 * c, h, w];
                for (name, spec) in &specs {
                    shape = infer_shape(spec, &shape)?;
                    ledger.push((format!("head.{name}"), shape.clone()));
                }
                merged = conv_out * h * w;
                stream_a = Vec::new();
                stream_b = Vec::new();
                head = instantiate(specs)?;
                merge_split = c;
            }
        }
        let output = ledger.last().map(|(_, s)| s[0]).unwrap_or(0);
        let mut g = ModelGraph {
            cfg: cfg.clone(),
            stream_a,
            stream_b,
            head,
            merge_axis: 1,
            merge_split,
            ledger: DimensionLedger {
                layers: ledger,
                stream_flatten,
                merged,
                output,
            },
            batch: 0,
        };
        g.initialize(seed);
        Ok(g)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_init = self.cfg.conv_init;
        for nl in self.layers_mut() {
            match &mut nl.layer {
                Layer::Conv2d(c) => {
                    let std = match conv_init {
                        ConvInit::Fixed(s) => s,
                        ConvInit::FanIn => {
                            let fan_in: usize = c.weight.shape()[1..].iter().product();
                            (2.0 / fan_in as f64).sqrt()
                        }
                    };
                    init_gaussian(&mut c.weight, std, &mut rng);
                }
                Layer::Linear(l) => init_xavier(&mut l.weight, &mut rng),
                _ => {}
            }
        }
        let gain = T::from_f64_lossy(self.cfg.output_init_gain);
        if let Some(Layer::Linear(l)) = self
            .head
            .iter_mut()
            .rev()
            .map(|nl| &mut nl.layer)
            .find(|l| matches!(l, Layer::Linear(_)))
        {
            l.weight.data_mut().iter_mut().for_each(|w| *w = *w * gain);
        }
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut NamedLayer<T>> {
        self.stream_a
            .iter_mut()
            .chain(self.stream_b.iter_mut())
            .chain(self.head.iter_mut())
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &DimensionLedger {
        &self.ledger
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let want = self.cfg.input_shape();
        match *x.shape() {
            [n, c, h, w] => {
                if c != want[0] {
                    return Err(NetError::ChannelMismatch {
                        expected: want[0],
                        got: c,
                    });
                }
                if [h, w] != [want[1], want[2]] || n == 0 {
                    return Err(NetError::ShapeMismatch(format!(
                        "input {:?}, expected (N, {}, {}, {})",
                        x.shape(),
                        want[0],
                        want[1],
                        want[2]
                    )));
                }
                Ok(n)
            }
            _ => Err(NetError::ShapeMismatch(format!(
                "input {:?} is not NCHW",
                x.shape()
            ))),
        }
    }

    /// `(N, 3)` motion estimates for a batch of frame pairs. Dropout is active
    /// only when `train` is set; `rng` drives the dropout masks.
    pub fn forward(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let n = self.check_input(a)?;
        if self.check_input(b)? != n {
            return Err(NetError::ShapeMismatch(format!(
                "batch sizes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        self.batch = n;
        let (fa, fb) = if self.cfg.shared_streams && !self.stream_a.is_empty() {
            let both = concat(a, b, 0)?;
            let f = run(&mut self.stream_a, both, train, rng)?;
            let (fa, fb) = concat_backward(&f, 0, n)?;
            (fa, fb)
        } else {
            (
                run(&mut self.stream_a, a.clone(), train, rng)?,
                run(&mut self.stream_b, b.clone(), train, rng)?,
            )
        };
        let merged = concat(&fa, &fb, self.merge_axis)?;
        run(&mut self.head, merged, train, rng)
    }

    /// Backpropagates `grad` (d loss / d output) and accumulates parameter
    /// gradients. Call after [`ModelGraph::forward`].
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != [self.batch, OUTPUT_DIM] {
            return Err(NetError::ShapeMismatch(format!(
                "output grad {:?}, expected [{}, {OUTPUT_DIM}]",
                grad.shape(),
                self.batch
            )));
        }
        let g = run_back(&mut self.head, grad.clone())?;
        let (ga, gb) = concat_backward(&g, self.merge_axis, self.merge_split)?;
        if self.cfg.shared_streams && !self.stream_a.is_empty() {
            let both = concat(&ga, &gb, 0)?;
            run_back(&mut self.stream_a, both)?;
        } else {
            run_back(&mut self.stream_a, ga)?;
            run_back(&mut self.stream_b, gb)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for nl in self.layers_mut() {
            for (_, p) in nl.layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn clear_cache(&mut self) {
        for nl in self.layers_mut() {
            nl.layer.clear_cache();
        }
    }

    fn groups(&self) -> [(&'static str, &Vec<NamedLayer<T>>); 3] {
        [
            ("stream_a", &self.stream_a),
            ("stream_b", &self.stream_b),
            ("head", &self.head),
        ]
    }

    /// Parameters in a fixed order with names like `stream_a.conv1.weight`.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, layers) in self.groups() {
            for nl in layers {
                for (pname, p) in nl.layer.params() {
                    out.push((format!("{prefix}.{}.{pname}", nl.name), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("stream_a", &mut self.stream_a),
            ("stream_b", &mut self.stream_b),
            ("head", &mut self.head),
        ] {
            for nl in layers.iter_mut() {
                let lname = nl.name.clone();
                for (pname, p) in nl.layer.params_mut() {
                    out.push((format!("{prefix}.{lname}.{pname}"), p));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Layer specs in execution order, prefixed by group.
    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        let mut out = Vec::new();
        for (prefix, layers) in self.groups() {
            for nl in layers {
                out.push((format!("{prefix}.{}", nl.name), nl.spec));
            }
        }
        out
    }

    /// Copies parameter values into a checkpoint along with the config keys.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, p) in self.params() {
            ck.push(name, p.cast::<f32>());
        }
        for (k, v) in self.cfg.to_kv() {
            ck.metadata.insert(k, v);
        }
        ck
    }

    /// Loads every parameter from `ck` by name.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, p) in self.params_mut() {
            let src = ck
                .get(&name)
                .ok_or_else(|| NetError::ShapeMismatch(format!("checkpoint lacks {name}")))?;
            if src.shape() != p.shape() {
                return Err(NetError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    src.shape(),
                    p.shape()
                )));
            }
            for (d, s) in p.data_mut().iter_mut().zip(src.data()) {
                *d = T::from_f64_lossy(*s as f64);
            }
        }
        Ok(())
    }

    /// Rebuilds a network from a checkpoint written by [`ModelGraph::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = NetConfig::from_kv(&ck.metadata)?;
        let mut g = Self::build(&cfg, 0)?;
        g.load_params(ck)?;
        Ok(g)
    }
}

fn shape_for_head(ledger: &[(String, Vec<usize>)]) -> Vec<usize> {
    ledger.last().map(|(_, s)| s.clone()).unwrap_or_default()
}

fn run<T: Real>(
    layers: &mut [NamedLayer<T>],
    mut x: Tensor<T>,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    for nl in layers {
        x = nl.layer.forward(x, train, rng)?;
    }
    Ok(x)
}

fn run_back<T: Real>(layers: &mut [NamedLayer<T>], mut g: Tensor<T>) -> Result<Tensor<T>> {
    for nl in layers.iter_mut().rev() {
        g = nl.layer.backward(&g)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_dimensions() {
        let g = ModelGraph::<f32>::build(&NetConfig::two_stream(1.0), 0).unwrap();
        let l = g.ledger();
        assert_eq!((l.stream_flatten, l.merged, l.output), (4096, 8192, 3));
        let find = |n: &str| {
            l.layers
                .iter()
                .find(|(name, _)| name == n)
                .unwrap()
                .1
                .clone()
        };
        assert_eq!(find("stream.conv1"), vec![96, 62, 62]);
        assert_eq!(find("stream.pool1"), vec![96, 30, 30]);
        assert_eq!(find("stream.pool2"), vec![256, 14, 14]);
        assert_eq!(find("stream.conv5"), vec![256, 14, 14]);
        assert_eq!(find("stream.pool5"), vec![256, 4, 4]);
        assert_eq!(find("head.fc1"), vec![4096]);
        assert_eq!(find("head.fc2"), vec![1024]);
        assert_eq!(find("head.fc3"), vec![128]);
    }

    #[test]
    fn parameter_count_at_full_width() {
        let g = ModelGraph::<f32>::build(&NetConfig::two_stream(1.0), 0).unwrap();
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let stream = conv(96, 3, 11)
            + conv(256, 96, 5)
            + conv(384, 256, 3)
            + conv(384, 384, 3)
            + conv(256, 384, 3);
        let fc = |i: usize, o: usize| i * o + o;
        let head = fc(8192, 4096) + fc(4096, 1024) + fc(1024, 128) + fc(128, 3);
        assert_eq!(g.param_count(), 2 * stream + head);
    }

    #[test]
    fn quarter_width_dimensions() {
        let g = ModelGraph::<f32>::build(&NetConfig::two_stream(0.25), 0).unwrap();
        let l = g.ledger();
        assert_eq!((l.stream_flatten, l.merged, l.output), (1024, 2048, 3));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetConfig::two_stream(1.0);
        cfg.input_channels = 4;
        assert!(matches!(
            ModelGraph::<f32>::build(&cfg, 0),
            Err(NetError::InvalidConfig(_))
        ));
        let mut cfg = NetConfig::two_stream_fast(1.0);
        cfg.input_channels = 3;
        assert!(cfg.validate().is_err());
        assert!(NetConfig::two_stream(0.0).validate().is_err());
        assert!(NetConfig::two_stream(1.5).validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = NetConfig::two_stream_fast(0.25);
        cfg.geometry = StreamGeometry::COMPACT;
        cfg.input_size = 64;
        cfg.conv_init = ConvInit::FanIn;
        cfg.dropout_p = 0.3;
        cfg.output_init_gain = 0.01;
        assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn output_gain_scales_only_the_last_layer() {
        let mut cfg = NetConfig::two_stream(0.125);
        cfg.geometry = StreamGeometry::TINY;
        cfg.input_size = 8;
        let plain = ModelGraph::<f64>::build(&cfg, 4).unwrap();
        cfg.output_init_gain = 0.5;
        let scaled = ModelGraph::<f64>::build(&cfg, 4).unwrap();
        let (a, b) = (plain.params(), scaled.params());
        let last_weight = a
            .iter()
            .rposition(|(n, t)| n.ends_with("weight") && t.shape().len() == 2)
            .unwrap();
        for (i, ((name, x), (_, y))) in a.iter().zip(&b).enumerate() {
            let k = if i == last_weight { 0.5 } else { 1.0 };
            assert!(
                x.data().iter().zip(y.data()).all(|(u, v)| *u * k == *v),
                "{name}"
            );
        }
        cfg.output_init_gain = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut cfg = NetConfig::two_stream_fast(0.125);
        cfg.geometry = StreamGeometry::TINY;
        cfg.input_size = 8;
        let mut g = ModelGraph::<f64>::build(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            g.forward(&x, &x, false, &mut rng),
            Err(NetError::ChannelMismatch {
                expected: 4,
                got: 3
            })
        ));
        let x = Tensor::zeros(&[2, 4, 8, 8]);
        assert_eq!(g.forward(&x, &x, false, &mut rng).unwrap().shape(), &[2, 3]);
    }
}
