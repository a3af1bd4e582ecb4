//! Feedforward spiking networks: declarative layer specs, parameters,
//! interlaminar residual blocks, time-stepped inference and operation
//! accounting.

pub mod bitplane;
pub mod block;
pub mod forward;
pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::NeuronConfig;
use crate::tensor::{BatchNormParams, Conv2dParams, Tensor};

pub use bitplane::{absorb_bit_weights, accumulate_conv, BitPlaneConv};
pub use block::{eca_weights, interlaminar_forward, BlockState, InterlaminarBlock, Shortcut};
pub use forward::{forward_timesteps, ConvPath, ForwardOptions, ForwardOutput, SiteTrace, Trace};
pub use ops::{count_ops, EnergyModel, LayerOps, OpKind, OpReport};

/// Default ECA kernel length.
pub const DEFAULT_ECA_KERNEL: usize = 3;

fn default_eca_kernel() -> usize {
    DEFAULT_ECA_KERNEL
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Neuron {
        config: NeuronConfig,
    },
    Relu,
    /// Residual basic block with interlaminar fusion.
    Block {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        #[serde(default = "default_eca_kernel")]
        eca_kernel: usize,
        #[serde(default = "default_true")]
        interlaminar: bool,
        neuron: NeuronConfig,
    },
    /// Global average pool, `[C, H, W] -> [C]`.
    Pool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Non-firing output layer; logits are its time-averaged input current.
    Readout {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Neuron { .. } => "neuron",
            LayerSpec::Relu => "relu",
            LayerSpec::Block { .. } => "block",
            LayerSpec::Pool => "pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Readout { .. } => "readout",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// The raw input is injected as the same current at every time step.
    #[default]
    ConstantCurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[C, H, W]` or `[F]`.
    pub input_shape: Vec<usize>,
    pub time_steps: usize,
    #[serde(default)]
    pub encoding: Encoding,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Checks layer compatibility; returns the per-sample output shape of
    /// every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be >= 1".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input_shape {:?}", self.input_shape)));
        }
        let readouts = self.layers.iter().filter(|l| matches!(l, LayerSpec::Readout { .. })).count();
        if readouts != 1 || !matches!(self.layers.last(), Some(LayerSpec::Readout { .. })) {
            return Err(Error::Config("network needs exactly one readout layer, placed last".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_output_shape(layer, &shape).map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn is_spiking(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Neuron { .. } | LayerSpec::Block { .. }))
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Readout { out_features, .. }) => *out_features,
            _ => 0,
        }
    }
}

fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 || !(padded - k).is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "extent {len} with kernel {k}, stride {stride}, padding {pad} is not integral"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let need_chw = || -> Result<(usize, usize, usize)> {
        match input[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!("expected [C, H, W] input, got {input:?}"))),
        }
    };
    match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (c, h, w) = need_chw()?;
            if c != in_channels || kernel == 0 || out_channels == 0 {
                return Err(Error::invalid(format!("conv expects {in_channels} channels, got {c}")));
            }
            Ok(vec![
                out_channels,
                conv_extent(h, kernel, stride, padding)?,
                conv_extent(w, kernel, stride, padding)?,
            ])
        }
        LayerSpec::BatchNorm { channels } => {
            if input.len() != 1 && input.len() != 3 || input[0] != channels {
                return Err(Error::invalid(format!("batch norm over {channels} channels, got {input:?}")));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Neuron { config } => {
            config.validate()?;
            Ok(input.to_vec())
        }
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::Block {
            in_channels,
            out_channels,
            stride,
            eca_kernel,
            neuron,
            ..
        } => {
            let (c, h, w) = need_chw()?;
            if c != in_channels || out_channels == 0 {
                return Err(Error::invalid(format!("block expects {in_channels} channels, got {c}")));
            }
            if eca_kernel % 2 == 0 {
                return Err(Error::invalid(format!("eca_kernel must be odd, got {eca_kernel}")));
            }
            neuron.validate()?;
            Ok(vec![out_channels, conv_extent(h, 3, stride, 1)?, conv_extent(w, 3, stride, 1)?])
        }
        LayerSpec::Pool => {
            let (c, _, _) = need_chw()?;
            Ok(vec![c])
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Linear {
            in_features,
            out_features,
        }
        | LayerSpec::Readout {
            in_features,
            out_features,
        } => {
            if input != [in_features] || out_features == 0 {
                return Err(Error::invalid(format!("linear expects [{in_features}], got {input:?}")));
            }
            Ok(vec![out_features])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    /// The same map as a 1x1 convolution over `[N, F, 1, 1]`.
    pub fn as_conv(&self) -> Conv2dParams {
        let (o, f) = self.weight.dims2().expect("rank 2 weight");
        Conv2dParams {
            weight: self.weight.clone().reshape(&[o, f, 1, 1]).expect("same length"),
            bias: self.bias.clone(),
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv(Conv2dParams),
    BatchNorm(BatchNormParams),
    Neuron(NeuronConfig),
    Relu,
    Block(Box<InterlaminarBlock>),
    Pool,
    Flatten,
    Linear(LinearParams),
    Readout(LinearParams),
}

/// Role of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum TensorTag {
    Weight = 1,
    Bias = 2,
    Gamma = 3,
    Beta = 4,
    RunningMean = 5,
    RunningVar = 6,
    EcaKernel = 7,
}

impl TensorTag {
    pub fn from_u32(v: u32) -> Option<Self> {
        use TensorTag::*;
        [Weight, Bias, Gamma, Beta, RunningMean, RunningVar, EcaKernel]
            .into_iter()
            .find(|t| *t as u32 == v)
    }

    pub fn is_learnable(self) -> bool {
        !matches!(self, TensorTag::RunningMean | TensorTag::RunningVar)
    }
}

fn conv_tensors(c: &Conv2dParams) -> [(TensorTag, &Tensor); 2] {
    [(TensorTag::Weight, &c.weight), (TensorTag::Bias, &c.bias)]
}

fn conv_tensors_mut(c: &mut Conv2dParams) -> [(TensorTag, &mut Tensor); 2] {
    [(TensorTag::Weight, &mut c.weight), (TensorTag::Bias, &mut c.bias)]
}

fn bn_tensors(b: &BatchNormParams) -> [(TensorTag, &Tensor); 4] {
    [
        (TensorTag::Gamma, &b.gamma),
        (TensorTag::Beta, &b.beta),
        (TensorTag::RunningMean, &b.running_mean),
        (TensorTag::RunningVar, &b.running_var),
    ]
}

fn bn_tensors_mut(b: &mut BatchNormParams) -> [(TensorTag, &mut Tensor); 4] {
    [
        (TensorTag::Gamma, &mut b.gamma),
        (TensorTag::Beta, &mut b.beta),
        (TensorTag::RunningMean, &mut b.running_mean),
        (TensorTag::RunningVar, &mut b.running_var),
    ]
}

impl LayerParams {
    /// Every stored tensor in canonical order.
    pub fn tensors(&self) -> Vec<(TensorTag, &Tensor)> {
        let mut out = Vec::new();
        match self {
            LayerParams::Conv(c) => out.extend(conv_tensors(c)),
            LayerParams::BatchNorm(b) => out.extend(bn_tensors(b)),
            LayerParams::Linear(l) | LayerParams::Readout(l) => {
                out.push((TensorTag::Weight, &l.weight));
                out.push((TensorTag::Bias, &l.bias));
            }
            LayerParams::Block(b) => {
                out.extend(conv_tensors(&b.conv1));
                out.extend(bn_tensors(&b.bn1));
                out.extend(conv_tensors(&b.conv2));
                out.extend(bn_tensors(&b.bn2));
                out.extend(conv_tensors(&b.fuse));
                out.extend(bn_tensors(&b.fuse_bn));
                out.push((TensorTag::EcaKernel, &b.eca_kernel));
                if let Shortcut::Projection { conv, bn } = &b.shortcut {
                    out.extend(conv_tensors(conv));
                    out.extend(bn_tensors(bn));
                }
            }
            LayerParams::Neuron(_) | LayerParams::Relu | LayerParams::Pool | LayerParams::Flatten => {}
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorTag, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            LayerParams::Conv(c) => out.extend(conv_tensors_mut(c)),
            LayerParams::BatchNorm(b) => out.extend(bn_tensors_mut(b)),
            LayerParams::Linear(l) | LayerParams::Readout(l) => {
                out.push((TensorTag::Weight, &mut l.weight));
                out.push((TensorTag::Bias, &mut l.bias));
            }
            LayerParams::Block(b) => {
                let b = &mut **b;
                out.extend(conv_tensors_mut(&mut b.conv1));
                out.extend(bn_tensors_mut(&mut b.bn1));
                out.extend(conv_tensors_mut(&mut b.conv2));
                out.extend(bn_tensors_mut(&mut b.bn2));
                out.extend(conv_tensors_mut(&mut b.fuse));
                out.extend(bn_tensors_mut(&mut b.fuse_bn));
                out.push((TensorTag::EcaKernel, &mut b.eca_kernel));
                if let Shortcut::Projection { conv, bn } = &mut b.shortcut {
                    out.extend(conv_tensors_mut(conv));
                    out.extend(bn_tensors_mut(bn));
                }
            }
            LayerParams::Neuron(_) | LayerParams::Relu | LayerParams::Pool | LayerParams::Flatten => {}
        }
        out
    }

    /// Zero-valued parameters for a layer spec.
    pub fn zeros_for(spec: &LayerSpec) -> LayerParams {
        match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerParams::Conv(Conv2dParams::zeros(out_channels, in_channels, kernel, stride, padding)),
            LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm(BatchNormParams::identity(channels)),
            LayerSpec::Neuron { config } => LayerParams::Neuron(config),
            LayerSpec::Relu => LayerParams::Relu,
            LayerSpec::Block {
                in_channels,
                out_channels,
                stride,
                eca_kernel,
                interlaminar,
                neuron,
            } => LayerParams::Block(Box::new(InterlaminarBlock::zeros(
                in_channels,
                out_channels,
                stride,
                eca_kernel,
                interlaminar,
                neuron,
            ))),
            LayerSpec::Pool => LayerParams::Pool,
            LayerSpec::Flatten => LayerParams::Flatten,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => LayerParams::Linear(LinearParams::zeros(in_features, out_features)),
            LayerSpec::Readout {
                in_features,
                out_features,
            } => LayerParams::Readout(LinearParams::zeros(in_features, out_features)),
        }
    }
}

/// A network spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerParams>,
}

impl Network {
    /// Pairs a spec with parameters, checking that every tensor has the
    /// shape the spec implies.
    pub fn new(spec: NetworkSpec, layers: Vec<LayerParams>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::Config(format!(
                "{} layer specs but {} parameter sets",
                spec.layers.len(),
                layers.len()
            )));
        }
        for (i, (ls, lp)) in spec.layers.iter().zip(&layers).enumerate() {
            let template = LayerParams::zeros_for(ls);
            let same_kind = std::mem::discriminant(&template) == std::mem::discriminant(lp);
            let a = template.tensors();
            let b = lp.tensors();
            let same_shapes = a.len() == b.len()
                && a.iter().zip(&b).all(|((ta, x), (tb, y))| ta == tb && x.shape() == y.shape());
            if !same_kind || !same_shapes {
                return Err(Error::Config(format!("layer {i} ({}) parameters do not match spec", ls.kind())));
            }
            let consistent = match (ls, lp) {
                (LayerSpec::Neuron { config }, LayerParams::Neuron(c)) => config == c,
                (LayerSpec::Block { neuron, interlaminar, eca_kernel, .. }, LayerParams::Block(b)) => {
                    b.neuron == *neuron && b.interlaminar == *interlaminar && b.eca_kernel.len() == *eca_kernel
                }
                (LayerSpec::Conv { stride, padding, .. }, LayerParams::Conv(c)) => c.stride == *stride && c.padding == *padding,
                _ => true,
            };
            if !consistent {
                return Err(Error::Config(format!("layer {i} ({}) configuration does not match spec", ls.kind())));
            }
            if let LayerParams::BatchNorm(b) = lp {
                b.validate()?;
            }
        }
        Ok(Network { spec, layers })
    }

    /// Kaiming-style fan-in initialization; BN starts as identity.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<LayerParams> = spec.layers.iter().map(LayerParams::zeros_for).collect();
        for layer in &mut layers {
            let readout = matches!(layer, LayerParams::Readout(_));
            for (tag, t) in layer.tensors_mut() {
                match tag {
                    TensorTag::Weight => {
                        let fan_in: usize = t.shape()[1..].iter().product();
                        let gain = if readout { 1.0 } else { 2.0 };
                        *t = Tensor::randn(t.shape(), (gain / fan_in as f64).sqrt(), &mut rng);
                    }
                    TensorTag::EcaKernel => {
                        let k = t.len();
                        *t = Tensor::randn(t.shape(), (1.0 / k as f64).sqrt(), &mut rng);
                    }
                    _ => {}
                }
            }
        }
        Network::new(spec, layers)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn into_parts(self) -> (NetworkSpec, Vec<LayerParams>) {
        (self.spec, self.layers)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Changes the number of simulated time steps.
    pub fn with_time_steps(mut self, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("time_steps must be >= 1"));
        }
        self.spec.time_steps = t;
        Ok(self)
    }

    pub fn tensors(&self) -> Vec<(TensorTag, &Tensor)> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorTag, &mut Tensor)> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn learnable(&self) -> Vec<&Tensor> {
        self.tensors()
            .into_iter()
            .filter(|(tag, _)| tag.is_learnable())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
            .into_iter()
            .filter(|(tag, _)| tag.is_learnable())
            .map(|(_, t)| t)
            .collect()
    }

    /// Rounds every stored tensor to `f32` precision, the precision of the
    /// model file.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Presets for the desk-scale experiments.
pub mod presets {
    use super::*;

    /// Three interlaminar blocks (default widths 16/32/64) behind a 3x3
    /// stem, then global pooling and a readout. Inputs are `[C, H, W]`.
    pub fn resnet8_slim(
        input_shape: &[usize],
        classes: usize,
        neuron: NeuronConfig,
        time_steps: usize,
        widths: [usize; 3],
        eca_kernel: usize,
        interlaminar: bool,
    ) -> NetworkSpec {
        let in_c = input_shape[0];
        let mut layers = vec![
            LayerSpec::Conv {
                in_channels: in_c,
                out_channels: widths[0],
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::BatchNorm { channels: widths[0] },
            LayerSpec::Neuron { config: neuron },
        ];
        let mut prev = widths[0];
        for &w in &widths {
            layers.push(LayerSpec::Block {
                in_channels: prev,
                out_channels: w,
                stride: 1,
                eca_kernel,
                interlaminar,
                neuron,
            });
            prev = w;
        }
        layers.push(LayerSpec::Pool);
        layers.push(LayerSpec::Readout {
            in_features: prev,
            out_features: classes,
        });
        NetworkSpec {
            input_shape: input_shape.to_vec(),
            time_steps,
            encoding: Encoding::ConstantCurrent,
            layers,
        }
    }

    #[derive(Clone, Copy, Debug)]
    pub enum Activation {
        Relu,
        Spiking(NeuronConfig),
    }

    /// `Linear -> [BN] -> activation` per hidden width, then a readout.
    pub fn mlp(
        in_features: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        batch_norm: bool,
        time_steps: usize,
    ) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut prev = in_features;
        for &h in hidden {
            layers.push(LayerSpec::Linear {
                in_features: prev,
                out_features: h,
            });
            if batch_norm {
                layers.push(LayerSpec::BatchNorm { channels: h });
            }
            layers.push(match activation {
                Activation::Relu => LayerSpec::Relu,
                Activation::Spiking(config) => LayerSpec::Neuron { config },
            });
            prev = h;
        }
        layers.push(LayerSpec::Readout {
            in_features: prev,
            out_features: classes,
        });
        NetworkSpec {
            input_shape: vec![in_features],
            time_steps,
            encoding: Encoding::ConstantCurrent,
            layers,
        }
    }
}
