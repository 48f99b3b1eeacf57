//! Fully convolutional residual networks: layer graph, construction,
//! execution, optimization and checkpoints.

mod checkpoint;
mod exec;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MANIFEST};
pub use exec::{backward, backward_with_input, forward, Mode, Tape};
pub use optim::{OptState, SgdConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    /// Batch normalization with frozen statistics.
    Affine { scale: Vec<f64>, shift: Vec<f64> },
    Relu,
    Dropout { rate: f64 },
    Residual(ResidualBlock),
    /// Convolutional classifier head emitting one score per class.
    Classifier(ConvParams),
}

/// `out = body(x) + shortcut(x)`; the shortcut is the identity unless a
/// projection is present.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub body: Vec<Layer>,
    pub projection: Option<ConvParams>,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Affine { .. } => "affine",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Residual(_) => "residual-block",
            Layer::Classifier(_) => "classifier-conv",
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(p) | Layer::Classifier(p) => p.output_shape(input),
            Layer::Affine { scale, .. } => {
                if scale.len() != input.c {
                    return Err(Error::shape(format!(
                        "affine over {} channels applied to input {input}",
                        scale.len()
                    )));
                }
                Ok(input)
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(input),
            Layer::Residual(block) => {
                let mut s = input;
                for l in &block.body {
                    s = l.output_shape(s)?;
                }
                let shortcut = match &block.projection {
                    Some(p) => p.output_shape(input)?,
                    None => input,
                };
                if shortcut != s {
                    return Err(Error::shape(format!(
                        "residual branch produces {s} but shortcut produces {shortcut}"
                    )));
                }
                Ok(s)
            }
        }
    }

    /// Stride of this layer along the main path (the body for residual blocks).
    fn stride(&self) -> usize {
        match self {
            Layer::Conv(p) | Layer::Classifier(p) => p.stride.0,
            Layer::Residual(b) => b.body.iter().map(Layer::stride).product(),
            _ => 1,
        }
    }
}

/// Which parameter tensor within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Weight,
    Bias,
    Scale,
    Shift,
}

/// Location of a layer inside the network: a top-level index plus, for
/// residual blocks, the body index or the projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Top,
    Body(usize),
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub part: Part,
    pub role: Role,
}

impl ParamKey {
    /// File-safe name, e.g. `003_body1_weight`.
    pub fn name(&self) -> String {
        let part = match self.part {
            Part::Top => String::new(),
            Part::Body(i) => format!("_body{i}"),
            Part::Projection => "_proj".to_string(),
        };
        let role = match self.role {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::Scale => "scale",
            Role::Shift => "shift",
        };
        format!("{:03}{part}_{role}", self.layer)
    }
}

/// Gradients for every parameter, in [`NetworkSpec::param_keys`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub keys: Vec<ParamKey>,
    pub values: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn get(&self, key: &ParamKey) -> Option<&[f64]> {
        self.keys
            .iter()
            .position(|k| k == key)
            .map(|i| self.values[i].as_slice())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub output_stride: usize,
}

fn visit_conv(
    p: &ConvParams,
    layer: usize,
    part: Part,
    f: &mut impl FnMut(ParamKey, &[f64], Shape),
) {
    let key = |role| ParamKey { layer, part, role };
    f(key(Role::Weight), p.weight.data(), p.weight.shape());
    f(key(Role::Bias), &p.bias, Shape::new(p.bias.len(), 1, 1, 1));
}

fn visit_conv_mut(p: &mut ConvParams, layer: usize, part: Part, f: &mut impl FnMut(ParamKey, &mut [f64])) {
    let key = |role| ParamKey { layer, part, role };
    f(key(Role::Weight), p.weight.data_mut());
    f(key(Role::Bias), &mut p.bias);
}

fn visit_layer(l: &Layer, layer: usize, part: Part, f: &mut impl FnMut(ParamKey, &[f64], Shape)) {
    match l {
        Layer::Conv(p) | Layer::Classifier(p) => visit_conv(p, layer, part, f),
        Layer::Affine { scale, shift } => {
            let s = Shape::new(scale.len(), 1, 1, 1);
            f(ParamKey { layer, part, role: Role::Scale }, scale, s);
            f(ParamKey { layer, part, role: Role::Shift }, shift, s);
        }
        Layer::Residual(b) => {
            for (i, inner) in b.body.iter().enumerate() {
                visit_layer(inner, layer, Part::Body(i), f);
            }
            if let Some(p) = &b.projection {
                visit_conv(p, layer, Part::Projection, f);
            }
        }
        Layer::Relu | Layer::Dropout { .. } => {}
    }
}

fn visit_layer_mut(l: &mut Layer, layer: usize, part: Part, f: &mut impl FnMut(ParamKey, &mut [f64])) {
    match l {
        Layer::Conv(p) | Layer::Classifier(p) => visit_conv_mut(p, layer, part, f),
        Layer::Affine { scale, shift } => {
            f(ParamKey { layer, part, role: Role::Scale }, scale);
            f(ParamKey { layer, part, role: Role::Shift }, shift);
        }
        Layer::Residual(b) => {
            for (i, inner) in b.body.iter_mut().enumerate() {
                visit_layer_mut(inner, layer, Part::Body(i), f);
            }
            if let Some(p) = &mut b.projection {
                visit_conv_mut(p, layer, Part::Projection, f);
            }
        }
        Layer::Relu | Layer::Dropout { .. } => {}
    }
}

impl NetworkSpec {
    /// Checks layer composition, stride bookkeeping and the classifier head.
    pub fn validate(&self) -> Result<()> {
        let Some(Layer::Classifier(head)) = self.layers.last() else {
            return Err(Error::invalid("network must end with a classifier-conv layer"));
        };
        if head.c_out() != self.num_classes {
            return Err(Error::invalid(format!(
                "classifier emits {} channels but the network has {} classes",
                head.c_out(),
                self.num_classes
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, Layer::Classifier(_)) && i + 1 != self.layers.len() {
                return Err(Error::invalid(format!("classifier-conv at {i} is not the last layer")));
            }
            if let Layer::Residual(b) = l {
                if b.body.iter().any(|x| matches!(x, Layer::Residual(_) | Layer::Classifier(_))) {
                    return Err(Error::invalid(format!(
                        "residual block {i} may only contain conv, affine, relu and dropout layers"
                    )));
                }
            }
        }
        let stride = self.stride_product();
        if stride != self.output_stride {
            return Err(Error::invalid(format!(
                "layer strides multiply to {stride} but output_stride is {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(Layer::stride).product()
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv(p) | Layer::Classifier(p) => Some(p.c_in()),
            Layer::Residual(b) => b.body.iter().find_map(|x| match x {
                Layer::Conv(p) => Some(p.c_in()),
                _ => None,
            }),
            _ => None,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut s = input;
        for l in &self.layers {
            s = l.output_shape(s)?;
        }
        Ok(s)
    }

    pub fn visit_params(&self, mut f: impl FnMut(ParamKey, &[f64], Shape)) {
        for (i, l) in self.layers.iter().enumerate() {
            visit_layer(l, i, Part::Top, &mut f);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKey, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_layer_mut(l, i, Part::Top, &mut f);
        }
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        self.visit_params(|k, _, _| keys.push(k));
        keys
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, v, _| n += v.len());
        n
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|_, v, _| out.extend_from_slice(v));
        out
    }

    /// Same graph with every parameter set to zero.
    pub fn zeros_like(&self) -> NetworkSpec {
        let mut z = self.clone();
        z.visit_params_mut(|_, v| v.fill(0.0));
        z
    }

    pub(crate) fn grads_from_shaped(&self) -> ParamGrads {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        self.visit_params(|k, v, _| {
            keys.push(k);
            values.push(v.to_vec());
        });
        ParamGrads { keys, values }
    }

    /// Rounds all parameters through `f32` so in-memory weights equal what a
    /// checkpoint reload yields.
    pub fn round_params_to_f32(&mut self) {
        self.visit_params_mut(|_, v| {
            for x in v {
                *x = *x as f32 as f64;
            }
        });
    }
}

/// Hyperparameters of the miniature FCRN family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcrnConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    pub classifier_kernel: usize,
    pub classifier_dilation: usize,
    pub output_stride: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_in_channels() -> usize {
    3
}

impl Default for FcrnConfig {
    fn default() -> Self {
        FcrnConfig {
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            num_classes: 4,
            classifier_kernel: 3,
            classifier_dilation: 2,
            output_stride: 4,
            dropout_rate: 0.0,
            in_channels: 3,
            init_seed: 0,
        }
    }
}

impl FcrnConfig {
    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.stage_widths.is_empty() {
            bad.push("network.stage_widths: must list at least one stage".to_string());
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            bad.push(format!(
                "network.blocks_per_stage: has {} entries but stage_widths has {}",
                self.blocks_per_stage.len(),
                self.stage_widths.len()
            ));
        }
        if self.stage_widths.contains(&0) {
            bad.push("network.stage_widths: widths must be >= 1".to_string());
        }
        if self.blocks_per_stage.contains(&0) {
            bad.push("network.blocks_per_stage: every stage needs >= 1 block".to_string());
        }
        if self.num_classes < 2 {
            bad.push(format!("network.num_classes: need >= 2, got {}", self.num_classes));
        }
        if self.classifier_kernel == 0 || self.classifier_kernel % 2 == 0 {
            bad.push(format!(
                "network.classifier_kernel: must be odd, got {}",
                self.classifier_kernel
            ));
        }
        if self.classifier_dilation == 0 {
            bad.push("network.classifier_dilation: must be >= 1".to_string());
        }
        if ![4, 8, 16, 32].contains(&self.output_stride) {
            bad.push(format!(
                "network.output_stride: must be one of 4, 8, 16, 32, got {}",
                self.output_stride
            ));
        } else {
            let available = 1usize << (1 + self.stage_widths.len());
            if self.output_stride > available {
                bad.push(format!(
                    "network.output_stride: {} unreachable with {} stride-2 sites (max {available})",
                    self.output_stride,
                    1 + self.stage_widths.len()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!(
                "network.dropout_rate: must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.in_channels == 0 {
            bad.push("network.in_channels: must be >= 1".to_string());
        }
        bad
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> ConvParams {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut p = ConvParams::zeros(c_out, c_in, k, k);
        for v in p.weight.data_mut() {
            *v = normal.sample(&mut self.rng);
        }
        p
    }
}

fn affine(c: usize) -> Layer {
    Layer::Affine {
        scale: vec![1.0; c],
        shift: vec![0.0; c],
    }
}

/// Stem (3x3 stride-2 conv, affine, relu), residual stages, and a dilated
/// convolutional classifier.
///
/// Stride-2 sites are the stem and the first block of each stage, used in
/// order until `output_stride` is reached; later stages run at stride 1.
/// Dropout, when enabled, sits inside every block of the last stage.
pub fn build_mini_fcrn(cfg: &FcrnConfig) -> Result<NetworkSpec> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
    };
    let mut remaining = cfg.output_stride / 2;
    let mut layers = vec![
        Layer::Conv(init.conv(cfg.stage_widths[0], cfg.in_channels, 3).with_stride(2).with_padding(1)),
        affine(cfg.stage_widths[0]),
        Layer::Relu,
    ];
    let mut c_in = cfg.stage_widths[0];
    let last_stage = cfg.stage_widths.len() - 1;
    for (stage, (&width, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && remaining > 1 {
                remaining /= 2;
                2
            } else {
                1
            };
            let mut body = vec![
                Layer::Conv(init.conv(width, c_in, 3).with_stride(stride).with_padding(1)),
                affine(width),
                Layer::Relu,
            ];
            if stage == last_stage && cfg.dropout_rate > 0.0 {
                body.push(Layer::Dropout { rate: cfg.dropout_rate });
            }
            body.push(Layer::Conv(init.conv(width, width, 3).with_padding(1)));
            body.push(affine(width));
            let projection = (stride != 1 || c_in != width)
                .then(|| init.conv(width, c_in, 1).with_stride(stride));
            layers.push(Layer::Residual(ResidualBlock { body, projection }));
            layers.push(Layer::Relu);
            c_in = width;
        }
    }
    let mut head = init
        .conv(cfg.num_classes, c_in, cfg.classifier_kernel)
        .with_dilation(cfg.classifier_dilation)
        .with_same_padding();
    head.bias.fill(0.0);
    layers.push(Layer::Classifier(head));

    let net = NetworkSpec {
        layers,
        num_classes: cfg.num_classes,
        output_stride: cfg.output_stride,
    };
    net.validate()?;
    Ok(net)
}

/// A deterministic random tensor in `[-1, 1)`, handy for tests and self-checks.
pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}
