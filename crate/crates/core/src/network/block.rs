//! Residual basic block with interlaminar connections.
//!
//! Both BN outputs of the block are concatenated, fused back to `C`
//! channels by a 1x1 conv + BN, gated per channel by efficient channel
//! attention, and added to the input of the second spiking neuron.

use crate::error::{Error, Result};
use crate::neuron::{charge, fire_quantize, reset, NeuronConfig, NeuronLayerState, SpikeTensor};
use crate::tensor::{
    batchnorm_apply, concat_channels, conv1d, global_avg_pool, scale_channels, sigmoid, BatchNormParams,
    Conv2dParams, Tensor,
};

use super::forward::{apply_conv, ConvPath, Signal};

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    /// 1x1 conv + BN, used when the block changes width or stride.
    Projection { conv: Conv2dParams, bn: BatchNormParams },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterlaminarBlock {
    pub conv1: Conv2dParams,
    pub bn1: BatchNormParams,
    pub conv2: Conv2dParams,
    pub bn2: BatchNormParams,
    /// 1x1 conv mapping `2C -> C`.
    pub fuse: Conv2dParams,
    pub fuse_bn: BatchNormParams,
    /// ECA 1-D kernel over channels; odd length.
    pub eca_kernel: Tensor,
    pub shortcut: Shortcut,
    pub neuron: NeuronConfig,
    /// When false the fuse path is skipped and this is a plain basic block.
    pub interlaminar: bool,
}

impl InterlaminarBlock {
    pub fn zeros(
        in_c: usize,
        out_c: usize,
        stride: usize,
        eca_kernel: usize,
        interlaminar: bool,
        neuron: NeuronConfig,
    ) -> Self {
        let shortcut = if in_c != out_c || stride != 1 {
            Shortcut::Projection {
                conv: Conv2dParams::zeros(out_c, in_c, 1, stride, 0),
                bn: BatchNormParams::identity(out_c),
            }
        } else {
            Shortcut::Identity
        };
        InterlaminarBlock {
            conv1: Conv2dParams::zeros(out_c, in_c, 3, stride, 1),
            bn1: BatchNormParams::identity(out_c),
            conv2: Conv2dParams::zeros(out_c, out_c, 3, 1, 1),
            bn2: BatchNormParams::identity(out_c),
            fuse: Conv2dParams::zeros(out_c, 2 * out_c, 1, 1, 0),
            fuse_bn: BatchNormParams::identity(out_c),
            eca_kernel: Tensor::zeros(&[eca_kernel]),
            shortcut,
            neuron,
            interlaminar,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub(crate) fn step(&self, x: &Signal, state: &mut BlockState, t: usize, path: ConvPath) -> Result<BlockStep> {
        let x_pre = batchnorm_apply(&apply_conv(&self.conv1, x, path)?, &self.bn1)?;
        state.ensure(t, x_pre.shape(), &self.neuron)?;

        let lif1 = state.lif1.take().expect("initialized");
        let lif1 = charge(lif1, &x_pre, &self.neuron)?;
        let membrane1 = lif1.u.clone();
        let s = fire_quantize(&lif1.u, &self.neuron);
        state.lif1 = Some(reset(lif1, &s, &self.neuron)?);

        let x_post = batchnorm_apply(&apply_conv(&self.conv2, &Signal::Spikes(s.clone()), path)?, &self.bn2)?;
        let shortcut = match &self.shortcut {
            Shortcut::Identity => x.values().into_owned(),
            Shortcut::Projection { conv, bn } => batchnorm_apply(&apply_conv(conv, x, path)?, bn)?,
        };
        let mut drive = x_post.add(&shortcut)?;
        let restim = if self.interlaminar {
            let fused = concat_channels(&x_pre, &x_post)?;
            let x_re = batchnorm_apply(&crate::tensor::conv2d(&fused, &self.fuse)?, &self.fuse_bn)?;
            let gate = eca_weights(&x_re, &self.eca_kernel)?;
            let x_re = scale_channels(&x_re, &gate)?;
            drive.add_assign(&x_re)?;
            Some(x_re)
        } else {
            None
        };

        if state.lif2.is_none() {
            state.lif2 = Some(NeuronLayerState::new(drive.shape(), &self.neuron));
        }
        let lif2 = state.lif2.take().expect("initialized");
        let lif2 = charge(lif2, &drive, &self.neuron)?;
        let membrane2 = lif2.u.clone();
        let out = fire_quantize(&lif2.u, &self.neuron);
        state.lif2 = Some(reset(lif2, &out, &self.neuron)?);
        state.next_step = t + 1;

        Ok(BlockStep {
            out,
            spikes1: s,
            membrane1,
            membrane2,
            restimulation: restim,
        })
    }
}

/// Per-step intermediates of a block, used for tracing.
#[derive(Clone, Debug)]
pub struct BlockStep {
    pub out: SpikeTensor,
    pub spikes1: SpikeTensor,
    /// First neuron, after charging.
    pub membrane1: Tensor,
    /// Second neuron, after charging (includes the re-stimulation).
    pub membrane2: Tensor,
    pub restimulation: Option<Tensor>,
}

/// Membrane state of both spiking neurons in a block.
#[derive(Clone, Debug, Default)]
pub struct BlockState {
    lif1: Option<NeuronLayerState>,
    lif2: Option<NeuronLayerState>,
    next_step: usize,
}

impl BlockState {
    /// Uninitialized; the block allocates membranes at `t = 0`.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn is_initialized(&self) -> bool {
        self.lif1.is_some()
    }

    pub fn lif1(&self) -> Option<&NeuronLayerState> {
        self.lif1.as_ref()
    }

    pub fn lif2(&self) -> Option<&NeuronLayerState> {
        self.lif2.as_ref()
    }

    fn ensure(&mut self, t: usize, shape: &[usize], cfg: &NeuronConfig) -> Result<()> {
        match &self.lif1 {
            None if t == 0 => {
                self.lif1 = Some(NeuronLayerState::new(shape, cfg));
                self.lif2 = None;
                self.next_step = 0;
                Ok(())
            }
            None => Err(Error::State(format!("block state uninitialized at time step {t}"))),
            Some(s) => {
                if t != self.next_step {
                    return Err(Error::State(format!(
                        "block state is at time step {}, asked for {t}",
                        self.next_step
                    )));
                }
                if s.shape() != shape {
                    return Err(Error::shape("interlaminar_forward", format!("{:?}", s.shape()), format!("{shape:?}")));
                }
                Ok(())
            }
        }
    }
}

/// Channel gates `sigmoid(conv1d(avgpool(x)))`, shape `[N, C]`.
pub fn eca_weights(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    let k = kernel.len();
    if k.is_multiple_of(2) {
        return Err(Error::invalid(format!("ECA kernel length must be odd, got {k}")));
    }
    let pooled = global_avg_pool(x)?.reshape(&[n, 1, c])?;
    let mixed = conv1d(&pooled, kernel, (k - 1) / 2)?;
    mixed.map(sigmoid).reshape(&[n, c])
}

/// One time step of the block on spike input `x`. The state is allocated
/// on the first call at `t = 0`; later calls must follow in order.
pub fn interlaminar_forward(
    x: &SpikeTensor,
    block: &InterlaminarBlock,
    state: &mut BlockState,
    t: usize,
) -> Result<SpikeTensor> {
    Ok(block.step(&Signal::Spikes(x.clone()), state, t, ConvPath::Direct)?.out)
}
