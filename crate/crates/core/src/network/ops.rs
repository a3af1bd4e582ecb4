//! Synaptic operation counts and an energy estimate.
//!
//! A layer fed by spikes performs one accumulate per set bit per synapse
//! it reaches; the bit-plane weights are absorbed into the kernels. A
//! layer fed by real values performs one multiply-accumulate per valid
//! tap. Bias additions and batch-norm affines are not counted since both
//! fold into the weights at deployment.

use crate::error::{Error, Result};
use crate::neuron::SpikeTensor;
use crate::tensor::{valid_taps, Conv2dParams};

use super::bitplane::reach;
use super::forward::Trace;
use super::{LayerParams, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Accumulate,
    MultiplyAccumulate,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Accumulate => "AC",
            OpKind::MultiplyAccumulate => "MAC",
        }
    }
}

/// Operations of one part of one layer at one time step, summed over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOps {
    pub layer: usize,
    pub op: &'static str,
    pub t: usize,
    pub kind: OpKind,
    pub count: u64,
}

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub e_ac_pj: f64,
    pub e_mac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_ac_pj: 0.9, e_mac_pj: 4.6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub batch: usize,
    pub time_steps: usize,
    pub rows: Vec<LayerOps>,
}

impl OpReport {
    fn total(&self, kind: OpKind) -> u64 {
        self.rows.iter().filter(|r| r.kind == kind).map(|r| r.count).sum()
    }

    pub fn total_ac(&self) -> u64 {
        self.total(OpKind::Accumulate)
    }

    pub fn total_mac(&self) -> u64 {
        self.total(OpKind::MultiplyAccumulate)
    }

    /// Total energy in picojoules for the whole batch.
    pub fn energy_pj(&self, model: &EnergyModel) -> f64 {
        self.total_ac() as f64 * model.e_ac_pj + self.total_mac() as f64 * model.e_mac_pj
    }

    pub fn energy_per_sample_pj(&self, model: &EnergyModel) -> f64 {
        self.energy_pj(model) / self.batch.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,t,op,kind,count\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.layer, r.t, r.op, r.kind.as_str(), r.count));
        }
        s
    }
}

#[derive(Clone, Copy)]
enum Source {
    /// Real-valued, per-sample shape given by the layer output shapes.
    Dense,
    /// Spikes emitted by the given site (possibly pooled or flattened).
    Spikes(usize),
}

fn spiking_conv_acs(spikes: &SpikeTensor, conv: &Conv2dParams) -> Result<u64> {
    let (n, c, h, w) = match spikes.shape()[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("count_ops", "[N, C, H, W] spikes", format!("{:?}", spikes.shape()))),
    };
    let (kh, kw) = conv.kernel();
    let (oh, ow) = conv.output_extent(h, w)?;
    let ry = reach(h, kh, conv.stride, conv.padding, oh);
    let rx = reach(w, kw, conv.stride, conv.padding, ow);
    let fan = conv.out_channels() as u64;
    let codes = spikes.codes();
    let mut total = 0u64;
    for ni in 0..n {
        for ci in 0..c {
            for (iy, ys) in ry.iter().enumerate() {
                for (ix, xs) in rx.iter().enumerate() {
                    let bits = codes[((ni * c + ci) * h + iy) * w + ix].count_ones() as u64;
                    total += bits * fan * (ys.len() * xs.len()) as u64;
                }
            }
        }
    }
    Ok(total)
}

fn dense_conv_macs(batch: usize, in_shape: &[usize], conv: &Conv2dParams) -> Result<u64> {
    let (h, w) = match in_shape[..] {
        [_, h, w] => (h, w),
        _ => return Err(Error::shape("count_ops", "[C, H, W]", format!("{in_shape:?}"))),
    };
    let (kh, kw) = conv.kernel();
    let (oh, ow) = conv.output_extent(h, w)?;
    let taps_y: u64 = (0..oh)
        .map(|o| {
            let (lo, hi) = valid_taps(o, conv.stride, conv.padding, kh, h);
            (hi - lo) as u64
        })
        .sum();
    let taps_x: u64 = (0..ow)
        .map(|o| {
            let (lo, hi) = valid_taps(o, conv.stride, conv.padding, kw, w);
            (hi - lo) as u64
        })
        .sum();
    Ok(batch as u64 * (conv.in_channels() * conv.out_channels()) as u64 * taps_y * taps_x)
}

/// Counts operations for a recorded forward pass.
pub fn count_ops(net: &Network, trace: &Trace) -> Result<OpReport> {
    let expected = super::forward::site_names(net).len();
    if trace.sites.len() != expected {
        return Err(Error::invalid(format!(
            "trace has {} spiking sites, network has {expected}",
            trace.sites.len()
        )));
    }
    let shapes = net.spec().validate()?;
    let batch = trace.batch;
    let mut rows = Vec::new();
    for t in 0..trace.time_steps {
        let spikes_at = |site: usize| -> Result<&SpikeTensor> {
            trace.sites[site]
                .spikes
                .get(t)
                .ok_or_else(|| Error::invalid(format!("trace for site {site} is missing step {t}")))
        };
        let mut src = Source::Dense;
        let mut site = 0;
        let mut push = |layer, op, kind, count| rows.push(LayerOps { layer, op, t, kind, count });
        for (i, layer) in net.layers().iter().enumerate() {
            let in_shape: &[usize] = if i == 0 { &net.spec().input_shape } else { &shapes[i - 1] };
            let conv_ops = |conv: &Conv2dParams, src: Source| -> Result<(OpKind, u64)> {
                Ok(match src {
                    Source::Spikes(s) => (OpKind::Accumulate, spiking_conv_acs(spikes_at(s)?, conv)?),
                    Source::Dense => (OpKind::MultiplyAccumulate, dense_conv_macs(batch, in_shape, conv)?),
                })
            };
            match layer {
                LayerParams::Conv(c) => {
                    let (kind, n) = conv_ops(c, src)?;
                    push(i, "conv", kind, n);
                    src = Source::Dense;
                }
                LayerParams::BatchNorm(_) | LayerParams::Relu => src = Source::Dense,
                LayerParams::Neuron(_) => {
                    src = Source::Spikes(site);
                    site += 1;
                }
                LayerParams::Block(b) => {
                    let (kind, n) = conv_ops(&b.conv1, src)?;
                    push(i, "block.conv1", kind, n);
                    push(i, "block.conv2", OpKind::Accumulate, spiking_conv_acs(spikes_at(site)?, &b.conv2)?);
                    if let super::Shortcut::Projection { conv, .. } = &b.shortcut {
                        let (kind, n) = conv_ops(conv, src)?;
                        push(i, "block.shortcut", kind, n);
                    }
                    if b.interlaminar {
                        let out = &shapes[i];
                        push(i, "block.fuse", OpKind::MultiplyAccumulate, dense_conv_macs(batch, &[2 * out[0], out[1], out[2]], &b.fuse)?);
                        let (c, k) = (out[0], b.eca_kernel.len());
                        let taps: usize = (0..c).map(|o| {
                            let (lo, hi) = valid_taps(o, 1, (k - 1) / 2, k, c);
                            hi - lo
                        }).sum();
                        push(i, "block.eca", OpKind::MultiplyAccumulate, (batch * taps) as u64);
                    }
                    src = Source::Spikes(site + 1);
                    site += 2;
                }
                LayerParams::Pool | LayerParams::Flatten => {}
                LayerParams::Linear(l) | LayerParams::Readout(l) => {
                    let (o, f) = l.weight.dims2()?;
                    let (kind, n) = match src {
                        Source::Spikes(s) => (OpKind::Accumulate, spikes_at(s)?.count_set_bits() * o as u64),
                        Source::Dense => (OpKind::MultiplyAccumulate, (batch * f * o) as u64),
                    };
                    let op = if matches!(layer, LayerParams::Readout(_)) { "readout" } else { "linear" };
                    push(i, op, kind, n);
                    src = Source::Dense;
                }
            }
        }
    }
    Ok(OpReport { batch, time_steps: trace.time_steps, rows })
}
