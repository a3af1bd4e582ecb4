//! Surrogate-gradient training through time.

pub mod data;
pub mod engine;
pub mod grad;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_timesteps, ForwardOptions, Network};
use crate::neuron::NeuronConfig;
use crate::tensor::Tensor;

pub use data::{gen_synthetic_dataset, load_idx, read_idx, write_idx, Dataset, IdxArray, Split, SyntheticKind};
pub use engine::{BnMode, Tape};

use engine::{update_running_stats, Engine};

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// A box of half-width `a` around every quantizer boundary.
    RectangularPerBoundary,
    /// Slope `1/V_th` over the representable range.
    #[default]
    StraightThroughClamped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default)]
    pub kind: SurrogateKind,
    /// Half-width of the rectangular window, in membrane units.
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_width() -> f64 {
    0.3
}

fn default_scale() -> f64 {
    1.0
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: SurrogateKind::default(),
            width: default_width(),
            scale: default_scale(),
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("surrogate width must be > 0, got {}", self.width)));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("surrogate scale must be finite".into()));
        }
        Ok(())
    }
}

/// Stand-in derivative of the emitted spike value w.r.t. the membrane
/// potential.
pub fn surrogate_backward(u: &Tensor, cfg: &NeuronConfig, s: &SurrogateConfig) -> Tensor {
    let fmt = cfg.format;
    match s.kind {
        SurrogateKind::StraightThroughClamped => {
            let hi = fmt.s_max() * cfg.v_th;
            let slope = s.scale / cfg.v_th;
            u.map(|v| if (0.0..=hi).contains(&v) { slope } else { 0.0 })
        }
        SurrogateKind::RectangularPerBoundary => {
            let step = fmt.step();
            let a = s.width;
            let max = fmt.max_code();
            u.map(|v| {
                // candidate boundaries k * step * V_th, filtered exactly below
                let lo = (((v - a) / (step * cfg.v_th)).floor() as i64).max(1);
                let hi = (((v + a) / (step * cfg.v_th)).ceil() as i64).min(max as i64);
                let hits = (lo..=hi)
                    .filter(|&k| (v - k as f64 * step * cfg.v_th).abs() < a)
                    .count();
                s.scale * hits as f64 * step / (2.0 * a)
            })
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub time_steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            time_steps: 4,
            seed: 0,
            optimizer: Optimizer::SgdMomentum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.time_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("time_steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per learnable tensor.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
    fn apply(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>, cfg: &TrainConfig) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *wi);
                *wi -= cfg.lr * *vi;
            }
        }
    }
}

/// Mean loss and learnable-parameter gradients for one batch, in the
/// order of [`Network::learnable`].
pub fn loss_and_gradients(
    net: &Network,
    inputs: &Tensor,
    labels: &[usize],
    time_steps: usize,
    s_cfg: &SurrogateConfig,
    bn: BnMode,
) -> Result<(f64, Vec<Tensor>, Tape)> {
    let engine = Engine::new(net, bn, *s_cfg, time_steps);
    let tape = engine.forward(inputs)?;
    let (loss, dlogits) = grad::softmax_cross_entropy(&tape.logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    let grads = engine
        .backward(&tape, &dlogits)?
        .iter()
        .flat_map(|l| l.tensors())
        .filter(|(tag, _)| tag.is_learnable())
        .map(|(_, t)| t.clone())
        .collect();
    Ok((loss, grads, tape))
}

/// One forward/backward pass over all time steps followed by an
/// SGD-momentum update. Returns the batch loss and the tape of the pass.
pub fn bptt_train_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    inputs: &Tensor,
    labels: &[usize],
    t_cfg: &TrainConfig,
    s_cfg: &SurrogateConfig,
) -> Result<(f64, Tape)> {
    let (loss, grads, tape) = loss_and_gradients(net, inputs, labels, t_cfg.time_steps, s_cfg, BnMode::Train)?;
    update_running_stats(net, &tape, BN_MOMENTUM);
    opt.apply(net.learnable_mut(), grads.iter().collect(), t_cfg);
    if net.learnable().iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok((loss, tape))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,test_acc";

    pub fn csv_row(&self) -> String {
        let test = self.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        format!("{},{:.6},{:.6},{}", self.epoch, self.loss, self.train_acc, test)
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Trains for `t_cfg.epochs` epochs, reshuffling every epoch with a
/// generator seeded from `t_cfg.seed`. Batches of one sample are skipped
/// since batch statistics need at least two values.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    t_cfg: &TrainConfig,
    s_cfg: &SurrogateConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    t_cfg.validate()?;
    s_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if net.spec().time_steps != t_cfg.time_steps {
        *net = net.clone().with_time_steps(t_cfg.time_steps)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t_cfg.seed);
    let mut opt = OptimizerState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(t_cfg.epochs);
    for epoch in 1..=t_cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(t_cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train.inputs.gather_outer(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, tape) = bptt_train_step(net, &mut opt, &x, &y, t_cfg, s_cfg)?;
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&tape.logits).iter().zip(&y).filter(|(p, l)| p == l).count();
            seen += chunk.len();
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc: test.map(|d| evaluate(net, d)).transpose()?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

const EVAL_CHUNK: usize = 256;

/// Predicted class per sample.
pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let x = inputs.slice_outer(start, (start + EVAL_CHUNK).min(n))?;
        out.extend(argmax_rows(&forward_timesteps(net, &x, &ForwardOptions::default())?.logits));
    }
    Ok(out)
}

/// Fraction of samples whose arg-max logit is the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let pred = predict(net, &data.inputs)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(net: &Network, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let k = net.num_classes();
    let mut m = vec![vec![0; k]; k];
    for (p, &l) in predict(net, &data.inputs)?.iter().zip(&data.labels) {
        m[l][*p] += 1;
    }
    Ok(m)
}
