//! Time-stepped inference.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::neuron::{charge, fire_quantize, reset, NeuronConfig, NeuronLayerState, SpikeTensor};
use crate::tensor::{batchnorm_apply, conv2d, global_avg_pool, linear, Conv2dParams, Tensor};

use super::bitplane::{absorb_bit_weights, accumulate_conv};
use super::block::BlockState;
use super::{LayerParams, LinearParams, Network};

/// How convolutions over spike inputs are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvPath {
    /// Real-valued convolution of the spike values.
    #[default]
    Direct,
    /// Bit-plane scatter of absorbed kernels; additions only.
    Accumulate,
}

/// Activation flowing between layers during one time step.
#[derive(Clone, Debug)]
pub enum Signal {
    Dense(Tensor),
    Spikes(SpikeTensor),
}

impl Signal {
    pub fn values(&self) -> Cow<'_, Tensor> {
        match self {
            Signal::Dense(t) => Cow::Borrowed(t),
            Signal::Spikes(s) => Cow::Owned(s.values()),
        }
    }
}

pub(crate) fn apply_conv(conv: &Conv2dParams, x: &Signal, path: ConvPath) -> Result<Tensor> {
    match (x, path) {
        (Signal::Spikes(s), ConvPath::Accumulate) => Ok(accumulate_conv(s, &absorb_bit_weights(conv, s.format()))?.0),
        _ => conv2d(&x.values(), conv),
    }
}

fn apply_linear(l: &LinearParams, x: &Signal, path: ConvPath) -> Result<Tensor> {
    match (x, path) {
        (Signal::Spikes(s), ConvPath::Accumulate) => {
            let n = s.shape()[0];
            let f = s.len() / n.max(1);
            let as_map = s.clone().reshape(&[n, f, 1, 1])?;
            let (y, _) = accumulate_conv(&as_map, &absorb_bit_weights(&l.as_conv(), s.format()))?;
            y.reshape(&[n, l.bias.len()])
        }
        _ => linear(&x.values(), &l.weight, &l.bias),
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub record_trace: bool,
    pub conv_path: ConvPath,
    /// Overrides the spec's time step count.
    pub time_steps: Option<usize>,
}

/// Membrane and spike history of one spiking neuron site.
#[derive(Clone, Debug)]
pub struct SiteTrace {
    pub name: String,
    pub config: NeuronConfig,
    /// Membrane potential after charging, one tensor per step.
    pub membrane: Vec<Tensor>,
    pub spikes: Vec<SpikeTensor>,
}

impl SiteTrace {
    /// Mean emitted spike value per neuron per step.
    pub fn firing_rate(&self) -> f64 {
        let total: f64 = self.spikes.iter().map(|s| s.values().sum()).sum();
        let count: usize = self.spikes.iter().map(|s| s.len()).sum();
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Fraction of neuron-steps that emitted a nonzero code.
    pub fn active_fraction(&self) -> f64 {
        let active: usize = self.spikes.iter().map(|s| s.count_nonzero()).sum();
        let count: usize = self.spikes.iter().map(|s| s.len()).sum();
        if count == 0 {
            0.0
        } else {
            active as f64 / count as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub time_steps: usize,
    pub batch: usize,
    /// Spiking sites in network order; a block contributes two.
    pub sites: Vec<SiteTrace>,
    /// Accumulated readout membrane after each step.
    pub readout: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<Trace>,
}

pub(crate) fn site_names(net: &Network) -> Vec<(String, NeuronConfig)> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            LayerParams::Neuron(cfg) => out.push((format!("L{i}.neuron"), *cfg)),
            LayerParams::Block(b) => {
                out.push((format!("L{i}.block.lif1"), b.neuron));
                out.push((format!("L{i}.block.lif2"), b.neuron));
            }
            _ => {}
        }
    }
    out
}

/// Reshapes `[N, ...]` input to `[N] ++ input_shape`.
pub(crate) fn shape_input(net: &Network, input: &Tensor) -> Result<Tensor> {
    let per: usize = net.spec().input_shape.iter().product();
    let n = *input.shape().first().unwrap_or(&0);
    if input.rank() < 2 || n == 0 || input.len() != n * per {
        return Err(Error::shape(
            "forward",
            format!("[N, {:?}]", net.spec().input_shape),
            format!("{:?}", input.shape()),
        ));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&net.spec().input_shape);
    input.clone().reshape(&shape)
}

enum LayerState {
    Stateless,
    Neuron(Option<NeuronLayerState>),
    Block(BlockState),
    Readout(Option<Tensor>),
}

/// Runs the network for `T` steps with the input injected as a constant
/// current each step. Logits are the readout's accumulated potential
/// divided by `T`.
pub fn forward_timesteps(net: &Network, input: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
    let t_steps = opts.time_steps.unwrap_or(net.spec().time_steps);
    if t_steps == 0 {
        return Err(Error::invalid("time_steps must be >= 1"));
    }
    let x0 = shape_input(net, input)?;
    let batch = x0.shape()[0];
    let mut states: Vec<LayerState> = net
        .layers()
        .iter()
        .map(|l| match l {
            LayerParams::Neuron(_) => LayerState::Neuron(None),
            LayerParams::Block(_) => LayerState::Block(BlockState::new()),
            LayerParams::Readout(_) => LayerState::Readout(None),
            _ => LayerState::Stateless,
        })
        .collect();
    let mut trace = opts.record_trace.then(|| Trace {
        time_steps: t_steps,
        batch,
        sites: site_names(net)
            .into_iter()
            .map(|(name, config)| SiteTrace {
                name,
                config,
                membrane: Vec::with_capacity(t_steps),
                spikes: Vec::with_capacity(t_steps),
            })
            .collect(),
        readout: Vec::with_capacity(t_steps),
    });
    let path = opts.conv_path;

    for t in 0..t_steps {
        let mut signal = Signal::Dense(x0.clone());
        let mut site = 0;
        for (layer, state) in net.layers().iter().zip(states.iter_mut()) {
            signal = match layer {
                LayerParams::Conv(c) => Signal::Dense(apply_conv(c, &signal, path)?),
                LayerParams::BatchNorm(b) => Signal::Dense(batchnorm_apply(&signal.values(), b)?),
                LayerParams::Relu => Signal::Dense(signal.values().map(|v| v.max(0.0))),
                LayerParams::Neuron(cfg) => {
                    let LayerState::Neuron(slot) = state else { unreachable!() };
                    let current = signal.values();
                    let st = slot
                        .take()
                        .unwrap_or_else(|| NeuronLayerState::new(current.shape(), cfg));
                    let st = charge(st, &current, cfg)?;
                    let spikes = fire_quantize(&st.u, cfg);
                    if let Some(tr) = trace.as_mut() {
                        tr.sites[site].membrane.push(st.u.clone());
                        tr.sites[site].spikes.push(spikes.clone());
                    }
                    site += 1;
                    *slot = Some(reset(st, &spikes, cfg)?);
                    Signal::Spikes(spikes)
                }
                LayerParams::Block(b) => {
                    let LayerState::Block(bs) = state else { unreachable!() };
                    let stepped = b.step(&signal, bs, t, path)?;
                    if let Some(tr) = trace.as_mut() {
                        tr.sites[site].membrane.push(stepped.membrane1);
                        tr.sites[site].spikes.push(stepped.spikes1);
                        tr.sites[site + 1].membrane.push(stepped.membrane2);
                        tr.sites[site + 1].spikes.push(stepped.out.clone());
                    }
                    site += 2;
                    Signal::Spikes(stepped.out)
                }
                LayerParams::Pool => Signal::Dense(global_avg_pool(&signal.values())?),
                LayerParams::Flatten => match signal {
                    Signal::Dense(t) => {
                        let n = t.shape()[0];
                        let f = t.len() / n.max(1);
                        Signal::Dense(t.reshape(&[n, f])?)
                    }
                    Signal::Spikes(s) => {
                        let n = s.shape()[0];
                        let f = s.len() / n.max(1);
                        Signal::Spikes(s.reshape(&[n, f])?)
                    }
                },
                LayerParams::Linear(l) => Signal::Dense(apply_linear(l, &signal, path)?),
                LayerParams::Readout(l) => {
                    let LayerState::Readout(acc) = state else { unreachable!() };
                    let current = apply_linear(l, &signal, path)?;
                    match acc {
                        Some(a) => a.add_assign(&current)?,
                        None => *acc = Some(current),
                    }
                    let potential = acc.as_ref().expect("set above").clone();
                    if let Some(tr) = trace.as_mut() {
                        tr.readout.push(potential.clone());
                    }
                    Signal::Dense(potential)
                }
            };
        }
    }

    let LayerState::Readout(Some(acc)) = states.pop().expect("readout is last") else {
        return Err(Error::State("readout produced no output".into()));
    };
    let logits = acc.scale(1.0 / t_steps as f64);
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOutput { logits, trace })
}
