//! ANN-to-SNN conversion with multi-bit integrate-and-fire neurons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, LinearParams, Network, NetworkSpec};
use crate::neuron::{BitFormat, NeuronConfig};
use crate::tensor::{batchnorm_apply, conv2d, fold_bn_into_conv, global_avg_pool, linear, Tensor};
use crate::train::{evaluate, fit, Dataset, SurrogateConfig, TrainConfig};

/// A ReLU network: no spiking layers, evaluated in a single time step.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnModel {
    net: Network,
}

impl AnnModel {
    pub fn new(net: Network) -> Result<Self> {
        if net.spec().is_spiking() {
            return Err(Error::Config("an ANN may not contain spiking layers".into()));
        }
        let net = if net.spec().time_steps != 1 { net.with_time_steps(1)? } else { net };
        Ok(AnnModel { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn relu_count(&self) -> usize {
        self.net.layers().iter().filter(|l| matches!(l, LayerParams::Relu)).count()
    }
}

/// Standard supervised training of a ReLU network. `t_cfg.time_steps` is
/// ignored; an ANN takes one step.
pub fn train_ann(spec: NetworkSpec, data: &Dataset, t_cfg: &TrainConfig) -> Result<AnnModel> {
    let mut net = AnnModel::new(Network::init(spec, t_cfg.seed)?)?.into_network();
    let cfg = TrainConfig { time_steps: 1, ..t_cfg.clone() };
    fit(&mut net, data, None, &cfg, &SurrogateConfig::default(), |_| {})?;
    AnnModel::new(net)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Max,
    #[default]
    Percentile,
}

impl std::str::FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(CalibrationMethod::Max),
            "percentile" => Ok(CalibrationMethod::Percentile),
            _ => Err(Error::invalid(format!("unknown calibration method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPolicy {
    pub method: CalibrationMethod,
    pub percentile: f64,
    pub calib_batches: usize,
    pub batch_size: usize,
}

impl Default for CalibrationPolicy {
    fn default() -> Self {
        CalibrationPolicy {
            method: CalibrationMethod::Percentile,
            percentile: 99.9,
            calib_batches: 10,
            batch_size: 64,
        }
    }
}

impl CalibrationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile must be in (0, 100], got {}", self.percentile)));
        }
        if self.calib_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("calibration needs at least one batch".into()));
        }
        Ok(())
    }
}

/// Linearly interpolated `p`-th percentile, found by selection.
pub fn percentile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} out of range")));
    }
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut below, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return Ok(below);
    }
    let above = rest.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(below + frac * (above - below))
}

/// Runs the ANN on `x` and hands every ReLU output to `sink`, in order.
fn relu_activations(net: &Network, x: &Tensor, mut sink: impl FnMut(usize, &Tensor)) -> Result<()> {
    let mut x = crate::network::forward::shape_input(net, x)?;
    let mut k = 0;
    for layer in net.layers() {
        x = match layer {
            LayerParams::Conv(c) => conv2d(&x, c)?,
            LayerParams::BatchNorm(b) => batchnorm_apply(&x, b)?,
            LayerParams::Relu => {
                let y = x.map(|v| v.max(0.0));
                sink(k, &y);
                k += 1;
                y
            }
            LayerParams::Pool => global_avg_pool(&x)?,
            LayerParams::Flatten => {
                let n = x.shape()[0];
                let f = x.len() / n;
                x.reshape(&[n, f])?
            }
            LayerParams::Linear(l) | LayerParams::Readout(l) => linear(&x, &l.weight, &l.bias)?,
            LayerParams::Neuron(_) | LayerParams::Block(_) => {
                return Err(Error::Config("an ANN may not contain spiking layers".into()))
            }
        };
    }
    Ok(())
}

/// One threshold per ReLU layer, from the activations on the first
/// `calib_batches * batch_size` samples of `calib`.
pub fn calibrate_thresholds(model: &AnnModel, policy: &CalibrationPolicy, calib: &Dataset) -> Result<Vec<f64>> {
    policy.validate()?;
    if calib.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    let n = calib.len().min(policy.calib_batches * policy.batch_size);
    let mut seen: Vec<Vec<f64>> = vec![Vec::new(); model.relu_count()];
    for start in (0..n).step_by(policy.batch_size) {
        let x = calib.inputs.slice_outer(start, (start + policy.batch_size).min(n))?;
        relu_activations(model.network(), &x, |k, y| seen[k].extend_from_slice(y.data()))?;
    }
    seen.into_iter()
        .map(|mut v| match policy.method {
            CalibrationMethod::Max => Ok(v.iter().cloned().fold(0.0, f64::max)),
            CalibrationMethod::Percentile => percentile(&mut v, policy.percentile),
        })
        .collect()
}

/// Folds every batch norm into the conv or linear layer before it.
pub fn fold_batchnorms(net: &Network) -> Result<Network> {
    let mut specs = Vec::new();
    let mut layers: Vec<LayerParams> = Vec::new();
    for (ls, lp) in net.spec().layers.iter().zip(net.layers()) {
        if let LayerParams::BatchNorm(bn) = lp {
            match layers.last_mut() {
                Some(LayerParams::Conv(c)) => *c = fold_bn_into_conv(c, bn)?,
                Some(LayerParams::Linear(l)) => {
                    let (o, f) = l.weight.dims2()?;
                    let folded = fold_bn_into_conv(&l.as_conv(), bn)?;
                    *l = LinearParams {
                        weight: folded.weight.reshape(&[o, f])?,
                        bias: folded.bias,
                    };
                }
                _ => return Err(Error::Config("batch norm must follow a conv or linear layer to be folded".into())),
            }
            continue;
        }
        specs.push(ls.clone());
        layers.push(lp.clone());
    }
    let spec = NetworkSpec { layers: specs, ..net.spec().clone() };
    Network::new(spec, layers)
}

/// Replaces ReLU `k` with an IF neuron of threshold `thresholds[k]` in
/// format `fmt`, and scales the weights of the next weighted layer by that
/// threshold so it sees rates in the ANN's units.
pub fn convert_ann_to_snn(model: &AnnModel, thresholds: &[f64], fmt: BitFormat, time_steps: usize) -> Result<Network> {
    if thresholds.len() != model.relu_count() {
        return Err(Error::invalid(format!(
            "{} thresholds for {} ReLU layers",
            thresholds.len(),
            model.relu_count()
        )));
    }
    if let Some(bad) = thresholds.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("threshold must be positive, got {bad}")));
    }
    let folded = fold_batchnorms(model.network())?;
    let (spec, mut layers) = folded.into_parts();
    let mut specs = spec.layers.clone();
    let mut pending: Option<f64> = None;
    let mut k = 0;
    for (ls, lp) in specs.iter_mut().zip(layers.iter_mut()) {
        match lp {
            LayerParams::Relu => {
                let config = NeuronConfig::conversion_if(thresholds[k], fmt);
                *ls = LayerSpec::Neuron { config };
                *lp = LayerParams::Neuron(config);
                pending = Some(thresholds[k]);
                k += 1;
            }
            LayerParams::Conv(c) => {
                if let Some(v) = pending.take() {
                    c.weight = c.weight.scale(v);
                }
            }
            LayerParams::Linear(l) | LayerParams::Readout(l) => {
                if let Some(v) = pending.take() {
                    l.weight = l.weight.scale(v);
                }
            }
            _ => {}
        }
    }
    Network::new(NetworkSpec { layers: specs, time_steps, ..spec }, layers)
}

/// Accuracy of `snn` at each time-step count.
pub fn evaluate_tsweep(snn: &Network, data: &Dataset, ts: &[usize]) -> Result<Vec<(usize, f64)>> {
    if ts.is_empty() {
        return Err(Error::invalid("empty time-step sweep"));
    }
    ts.iter()
        .map(|&t| Ok((t, evaluate(&snn.clone().with_time_steps(t)?, data)?)))
        .collect()
}

pub fn tsweep_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("T,accuracy\n");
    for (t, a) in rows {
        s.push_str(&format!("{t},{a:.6}\n"));
    }
    s
}
