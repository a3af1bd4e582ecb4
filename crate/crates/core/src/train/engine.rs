//! Layer-major forward pass with saved activations, and its backward pass.
//!
//! All `T` time steps of a layer are processed at once on tensors of
//! shape `[T*N, ...]`, rows `t*N..(t+1)*N` holding step `t`. Neurons walk
//! the time axis internally, so membrane carry-over is differentiated
//! through.

use crate::error::{Error, Result};
use crate::network::forward::shape_input;
use crate::network::{eca_weights, InterlaminarBlock, LayerParams, LinearParams, Network, Shortcut};
use crate::neuron::{charge, fire_quantize, reset, NeuronConfig, NeuronLayerState, ResetMode};
use crate::tensor::{
    batchnorm_apply, concat_channels, conv2d, global_avg_pool, linear, scale_channels, split_channels,
    BatchNormParams, Conv2dParams, Tensor,
};

use super::grad::{
    batchnorm_eval_backward, batchnorm_train_backward, batchnorm_train_forward, conv2d_backward,
    global_avg_pool_backward, linear_backward, BnCache,
};
use super::{surrogate_backward, SurrogateConfig};

/// Which statistics batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics over `(batch x time)`; running averages are updated.
    Train,
    /// Running statistics, as in inference.
    Eval,
}

/// Spike function used by the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FireMode {
    Quantize,
    /// `s = u / V_th` with no reset; a smooth stand-in for gradient checks.
    #[cfg_attr(not(test), allow(dead_code))]
    Relaxed,
}

enum BnSite {
    Train(BnCache),
    Eval(Tensor),
}

struct NeuronCache {
    decay: f64,
    /// Reset factor per element: 0 where a hard reset fired, else 1.
    keep: Vec<f64>,
    surrogate: Vec<f64>,
}

struct FuseCache {
    z: Tensor,
    bn: BnSite,
    fused: Tensor,
}

struct BlockCache {
    x: Tensor,
    bn1: BnSite,
    lif1: NeuronCache,
    s: Tensor,
    bn2: BnSite,
    shortcut: Option<BnSite>,
    fuse: Option<FuseCache>,
    lif2: NeuronCache,
}

enum Cache {
    Conv(Tensor),
    Bn(BnSite),
    Neuron(NeuronCache),
    Relu(Vec<bool>),
    Block(Box<BlockCache>),
    Reshape(Vec<usize>),
    Linear(Tensor),
}

/// Saved activations of one forward pass.
pub struct Tape {
    caches: Vec<Cache>,
    pub logits: Tensor,
    pub batch: usize,
    pub time_steps: usize,
}

pub(crate) struct Engine<'a> {
    pub net: &'a Network,
    pub bn: BnMode,
    pub fire: FireMode,
    pub surrogate: SurrogateConfig,
    pub time_steps: usize,
}

impl<'a> Engine<'a> {
    pub fn new(net: &'a Network, bn: BnMode, surrogate: SurrogateConfig, time_steps: usize) -> Self {
        Engine {
            net,
            bn,
            fire: FireMode::Quantize,
            surrogate,
            time_steps,
        }
    }

    fn bn_forward(&self, x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BnSite)> {
        match self.bn {
            BnMode::Train => {
                let (y, c) = batchnorm_train_forward(x, p)?;
                Ok((y, BnSite::Train(c)))
            }
            BnMode::Eval => Ok((batchnorm_apply(x, p)?, BnSite::Eval(x.clone()))),
        }
    }

    fn neuron_forward(&self, x: &Tensor, cfg: &NeuronConfig) -> Result<(Tensor, NeuronCache)> {
        let t_steps = self.time_steps;
        let rows = x.shape()[0] / t_steps;
        let mut step_shape = x.shape().to_vec();
        step_shape[0] = rows;
        let mut state = NeuronLayerState::new(&step_shape, cfg);
        let mut outs = Vec::with_capacity(t_steps);
        let mut keep = Vec::with_capacity(x.len());
        let mut surrogate = Vec::with_capacity(x.len());
        for t in 0..t_steps {
            state = charge(state, &x.slice_outer(t * rows, (t + 1) * rows)?, cfg)?;
            match self.fire {
                FireMode::Quantize => {
                    let spikes = fire_quantize(&state.u, cfg);
                    surrogate.extend_from_slice(surrogate_backward(&state.u, cfg, &self.surrogate).data());
                    match cfg.reset {
                        ResetMode::Hard => keep.extend(spikes.codes().iter().map(|&c| if c > 0 { 0.0 } else { 1.0 })),
                        ResetMode::Subtract => keep.extend(std::iter::repeat_n(1.0, spikes.len())),
                    }
                    outs.push(spikes.values());
                    state = reset(state, &spikes, cfg)?;
                }
                FireMode::Relaxed => {
                    outs.push(state.u.scale(1.0 / cfg.v_th));
                    surrogate.extend(std::iter::repeat_n(1.0 / cfg.v_th, state.u.len()));
                    keep.extend(std::iter::repeat_n(1.0, state.u.len()));
                }
            }
        }
        Ok((
            Tensor::stack_outer(&outs)?,
            NeuronCache {
                decay: cfg.decay(),
                keep,
                surrogate,
            },
        ))
    }

    /// Runs every layer for all time steps, keeping what backward needs.
    pub fn forward(&self, input: &Tensor) -> Result<Tape> {
        let t_steps = self.time_steps;
        if t_steps == 0 {
            return Err(Error::invalid("time_steps must be >= 1"));
        }
        let x0 = shape_input(self.net, input)?;
        let batch = x0.shape()[0];
        let mut x = Tensor::stack_outer(&vec![x0; t_steps])?;
        let mut caches = Vec::with_capacity(self.net.layers().len());
        let mut logits = None;
        for layer in self.net.layers() {
            let (y, cache) = match layer {
                LayerParams::Conv(c) => (conv2d(&x, c)?, Cache::Conv(x)),
                LayerParams::BatchNorm(b) => {
                    let (y, site) = self.bn_forward(&x, b)?;
                    (y, Cache::Bn(site))
                }
                LayerParams::Relu => {
                    let mask = x.data().iter().map(|&v| v > 0.0).collect();
                    (x.map(|v| v.max(0.0)), Cache::Relu(mask))
                }
                LayerParams::Neuron(cfg) => {
                    let (y, c) = self.neuron_forward(&x, cfg)?;
                    (y, Cache::Neuron(c))
                }
                LayerParams::Block(b) => {
                    let (y, c) = self.block_forward(x, b)?;
                    (y, Cache::Block(Box::new(c)))
                }
                LayerParams::Pool => (global_avg_pool(&x)?, Cache::Reshape(x.shape().to_vec())),
                LayerParams::Flatten => {
                    let shape = x.shape().to_vec();
                    let f = x.len() / shape[0];
                    (x.reshape(&[shape[0], f])?, Cache::Reshape(shape))
                }
                LayerParams::Linear(l) => (linear(&x, &l.weight, &l.bias)?, Cache::Linear(x)),
                LayerParams::Readout(l) => {
                    let current = linear(&x, &l.weight, &l.bias)?;
                    let mut acc = current.slice_outer(0, batch)?;
                    for t in 1..t_steps {
                        acc.add_assign(&current.slice_outer(t * batch, (t + 1) * batch)?)?;
                    }
                    logits = Some(acc.scale(1.0 / t_steps as f64));
                    (current, Cache::Linear(x))
                }
            };
            caches.push(cache);
            x = y;
        }
        Ok(Tape {
            caches,
            logits: logits.ok_or_else(|| Error::State("network has no readout".into()))?,
            batch,
            time_steps: t_steps,
        })
    }

    fn block_forward(&self, x: Tensor, b: &InterlaminarBlock) -> Result<(Tensor, BlockCache)> {
        let (x_pre, bn1) = self.bn_forward(&conv2d(&x, &b.conv1)?, &b.bn1)?;
        let (s, lif1) = self.neuron_forward(&x_pre, &b.neuron)?;
        let (x_post, bn2) = self.bn_forward(&conv2d(&s, &b.conv2)?, &b.bn2)?;
        let (shortcut, sc_site) = match &b.shortcut {
            Shortcut::Identity => (x.clone(), None),
            Shortcut::Projection { conv, bn } => {
                let (y, site) = self.bn_forward(&conv2d(&x, conv)?, bn)?;
                (y, Some(site))
            }
        };
        let mut drive = x_post.add(&shortcut)?;
        let fuse = if b.interlaminar {
            let z = concat_channels(&x_pre, &x_post)?;
            let (fused, site) = self.bn_forward(&conv2d(&z, &b.fuse)?, &b.fuse_bn)?;
            let gate = eca_weights(&fused, &b.eca_kernel)?;
            drive.add_assign(&scale_channels(&fused, &gate)?)?;
            Some(FuseCache { z, bn: site, fused })
        } else {
            None
        };
        let (out, lif2) = self.neuron_forward(&drive, &b.neuron)?;
        Ok((
            out,
            BlockCache {
                x,
                bn1,
                lif1,
                s,
                bn2,
                shortcut: sc_site,
                fuse,
                lif2,
            },
        ))
    }

    /// Gradients of the loss w.r.t. every parameter, shaped like the
    /// network's layers. Non-learnable tensors are left at zero.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor) -> Result<Vec<LayerParams>> {
        let spec = self.net.spec();
        let mut grads: Vec<LayerParams> = spec.layers.iter().map(LayerParams::zeros_for).collect();
        let t_steps = tape.time_steps;
        let scaled = dlogits.scale(1.0 / t_steps as f64);
        let mut g = Tensor::stack_outer(&vec![scaled; t_steps])?;
        for (i, (layer, cache)) in self.net.layers().iter().zip(&tape.caches).enumerate().rev() {
            g = match (layer, cache) {
                (LayerParams::Conv(c), Cache::Conv(x)) => {
                    let (dx, dw, db) = conv2d_backward(x, c, &g)?;
                    grads[i] = LayerParams::Conv(Conv2dParams { weight: dw, bias: db, ..c.clone() });
                    dx
                }
                (LayerParams::BatchNorm(p), Cache::Bn(site)) => {
                    let (dx, dp) = bn_backward(site, p, &g)?;
                    grads[i] = LayerParams::BatchNorm(dp);
                    dx
                }
                (LayerParams::Relu, Cache::Relu(mask)) => {
                    let mut d = g;
                    d.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| {
                        if !m {
                            *v = 0.0
                        }
                    });
                    d
                }
                (LayerParams::Neuron(_), Cache::Neuron(c)) => neuron_backward(c, &g, t_steps)?,
                (LayerParams::Block(b), Cache::Block(c)) => {
                    let (dx, db) = block_backward(b, c, &g, t_steps)?;
                    grads[i] = LayerParams::Block(Box::new(db));
                    dx
                }
                (LayerParams::Pool, Cache::Reshape(shape)) => global_avg_pool_backward(shape, &g)?,
                (LayerParams::Flatten, Cache::Reshape(shape)) => g.reshape(shape)?,
                (LayerParams::Linear(l), Cache::Linear(x)) | (LayerParams::Readout(l), Cache::Linear(x)) => {
                    let (dx, dw, db) = linear_backward(x, &l.weight, &g)?;
                    let p = LinearParams { weight: dw, bias: db };
                    grads[i] = if matches!(layer, LayerParams::Readout(_)) {
                        LayerParams::Readout(p)
                    } else {
                        LayerParams::Linear(p)
                    };
                    dx
                }
                _ => return Err(Error::State(format!("layer {i} does not match its saved activations"))),
            };
        }
        Ok(grads)
    }
}

fn bn_backward(site: &BnSite, p: &BatchNormParams, g: &Tensor) -> Result<(Tensor, BatchNormParams)> {
    let (dx, dgamma, dbeta) = match site {
        BnSite::Train(c) => batchnorm_train_backward(c, g)?,
        BnSite::Eval(x) => batchnorm_eval_backward(x, p, g)?,
    };
    let mut dp = BatchNormParams::identity(p.channels());
    dp.gamma = dgamma;
    dp.beta = dbeta;
    dp.running_var = Tensor::zeros(&[p.channels()]);
    Ok((dx, dp))
}

fn neuron_backward(c: &NeuronCache, g: &Tensor, t_steps: usize) -> Result<Tensor> {
    let per = g.len() / t_steps;
    if c.keep.len() != g.len() {
        return Err(Error::shape("neuron_backward", c.keep.len(), g.len()));
    }
    let mut dx = vec![0.0; g.len()];
    let mut carry = vec![0.0; per];
    for t in (0..t_steps).rev() {
        for (i, carried) in carry.iter_mut().enumerate() {
            let j = t * per + i;
            let da = g.data()[j] * c.surrogate[j] + *carried * c.keep[j];
            dx[j] = da;
            *carried = c.decay * da;
        }
    }
    Tensor::new(g.shape().to_vec(), dx)
}

fn block_backward(b: &InterlaminarBlock, c: &BlockCache, g: &Tensor, t_steps: usize) -> Result<(Tensor, InterlaminarBlock)> {
    let mut grads = InterlaminarBlock::zeros(
        b.in_channels(),
        b.out_channels(),
        b.conv1.stride,
        b.eca_kernel.len(),
        b.interlaminar,
        b.neuron,
    );
    let ddrive = neuron_backward(&c.lif2, g, t_steps)?;
    let mut dx_post = ddrive.clone();
    let mut dx_pre_extra = None;
    if let Some(f) = &c.fuse {
        let (dfused, dk) = super::grad::eca_backward(&f.fused, &b.eca_kernel, &ddrive)?;
        grads.eca_kernel = dk;
        let (dconv, dbn) = bn_backward(&f.bn, &b.fuse_bn, &dfused)?;
        grads.fuse_bn = dbn;
        let (dz, dw, dbias) = conv2d_backward(&f.z, &b.fuse, &dconv)?;
        grads.fuse.weight = dw;
        grads.fuse.bias = dbias;
        let (dpre, dpost) = split_channels(&dz, b.out_channels())?;
        dx_post.add_assign(&dpost)?;
        dx_pre_extra = Some(dpre);
    }
    let (dc2, dbn2) = bn_backward(&c.bn2, &b.bn2, &dx_post)?;
    grads.bn2 = dbn2;
    let (ds, dw2, db2) = conv2d_backward(&c.s, &b.conv2, &dc2)?;
    grads.conv2.weight = dw2;
    grads.conv2.bias = db2;
    let mut dx_pre = neuron_backward(&c.lif1, &ds, t_steps)?;
    if let Some(extra) = dx_pre_extra {
        dx_pre.add_assign(&extra)?;
    }
    let (dc1, dbn1) = bn_backward(&c.bn1, &b.bn1, &dx_pre)?;
    grads.bn1 = dbn1;
    let (mut dx, dw1, db1) = conv2d_backward(&c.x, &b.conv1, &dc1)?;
    grads.conv1.weight = dw1;
    grads.conv1.bias = db1;
    match (&b.shortcut, &c.shortcut, &mut grads.shortcut) {
        (Shortcut::Identity, None, _) => dx.add_assign(&ddrive)?,
        (Shortcut::Projection { conv, bn }, Some(site), Shortcut::Projection { conv: gc, bn: gb }) => {
            let (dsc, dbn) = bn_backward(site, bn, &ddrive)?;
            *gb = dbn;
            let (dxs, dw, db) = conv2d_backward(&c.x, conv, &dsc)?;
            gc.weight = dw;
            gc.bias = db;
            dx.add_assign(&dxs)?;
        }
        _ => return Err(Error::State("block shortcut does not match its saved activations".into())),
    }
    Ok((dx, grads))
}

/// Folds the batch statistics of a training-mode tape into the running
/// averages: `r <- (1 - momentum) r + momentum * batch`.
pub(crate) fn update_running_stats(net: &mut Network, tape: &Tape, momentum: f64) {
    fn fold(p: &mut BatchNormParams, site: &BnSite, momentum: f64) {
        if let BnSite::Train(c) = site {
            for (r, b) in p.running_mean.data_mut().iter_mut().zip(&c.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in p.running_var.data_mut().iter_mut().zip(&c.var_unbiased) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    for (layer, cache) in net.layers_mut().iter_mut().zip(&tape.caches) {
        match (layer, cache) {
            (LayerParams::BatchNorm(p), Cache::Bn(site)) => fold(p, site, momentum),
            (LayerParams::Block(b), Cache::Block(c)) => {
                fold(&mut b.bn1, &c.bn1, momentum);
                fold(&mut b.bn2, &c.bn2, momentum);
                if let (Shortcut::Projection { bn, .. }, Some(site)) = (&mut b.shortcut, &c.shortcut) {
                    fold(bn, site, momentum);
                }
                if let Some(f) = &c.fuse {
                    fold(&mut b.fuse_bn, &f.bn, momentum);
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_timesteps, presets, ForwardOptions, LayerSpec, NetworkSpec};
    use crate::neuron::{BitFormat, Leak};
    use crate::train::grad::softmax_cross_entropy;
    use crate::train::grad::tests::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_grads(g: &[LayerParams]) -> Tensor {
        let data: Vec<f64> = g
            .iter()
            .flat_map(|l| l.tensors())
            .filter(|(tag, _)| tag.is_learnable())
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        Tensor::from_vec(data)
    }

    fn flat_params(net: &Network) -> Tensor {
        Tensor::from_vec(net.learnable().into_iter().flat_map(|t| t.data().to_vec()).collect())
    }

    fn with_params(net: &Network, flat: &Tensor) -> Network {
        let mut n = net.clone();
        let mut k = 0;
        for t in n.learnable_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat.data()[k..k + len]);
            k += len;
        }
        n
    }

    fn loss_of(engine: &Engine, net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
        let e = Engine { net, ..*engine };
        softmax_cross_entropy(&e.forward(x).unwrap().logits, labels).unwrap().0
    }

    fn relaxed_check(net: &Network, x: &Tensor, labels: &[usize], bn: BnMode) -> f64 {
        let engine = Engine {
            net,
            bn,
            fire: FireMode::Relaxed,
            surrogate: SurrogateConfig::default(),
            time_steps: net.spec().time_steps,
        };
        let tape = engine.forward(x).unwrap();
        let (_, dl) = softmax_cross_entropy(&tape.logits, labels).unwrap();
        let grads = engine.backward(&tape, &dl).unwrap();
        fd_check(&flat_params(net), &flat_grads(&grads), |p| loss_of(&engine, &with_params(net, p), x, labels))
    }

    fn if_cfg(leak: Leak) -> NeuronConfig {
        let mut c = NeuronConfig::lif(1.0, 2.0, BitFormat::new(2, 1).unwrap());
        c.reset = ResetMode::Subtract;
        c.leak = leak;
        c
    }

    #[test]
    fn whole_network_gradient_through_blocks_and_time() {
        let spec = presets::resnet8_slim(&[2, 3, 3], 3, if_cfg(Leak::Leaky), 3, [3, 3, 4], 3, true);
        let mut net = Network::init(spec, 3).unwrap();
        // non-trivial running statistics for the eval-mode check
        for (tag, t) in net.tensors_mut() {
            if tag == crate::network::TensorTag::RunningVar {
                t.data_mut().iter_mut().for_each(|v| *v = 1.5);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let labels = [0, 1, 2];
        assert!(relaxed_check(&net, &x, &labels, BnMode::Train) <= 1e-4);
        assert!(relaxed_check(&net, &x, &labels, BnMode::Eval) <= 1e-4);
    }

    #[test]
    fn mlp_gradient_relaxed_and_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let labels = [0, 1, 1, 0];
        let spec = presets::mlp(3, &[5, 4], 2, presets::Activation::Spiking(if_cfg(Leak::None)), true, 4);
        assert!(relaxed_check(&Network::init(spec, 1).unwrap(), &x, &labels, BnMode::Train) <= 1e-4);
        let spec = presets::mlp(3, &[5], 2, presets::Activation::Relu, false, 1);
        assert!(relaxed_check(&Network::init(spec, 1).unwrap(), &x, &labels, BnMode::Eval) <= 1e-4);
    }

    #[test]
    fn readout_only_gradient_is_closed_form() {
        let spec = NetworkSpec {
            input_shape: vec![3],
            time_steps: 4,
            encoding: Default::default(),
            layers: vec![LayerSpec::Readout { in_features: 3, out_features: 2 }],
        };
        let net = Network::init(spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let labels = [0, 1, 1, 0, 1];
        let engine = Engine::new(&net, BnMode::Train, SurrogateConfig::default(), 4);
        let tape = engine.forward(&x).unwrap();
        let (_, dl) = softmax_cross_entropy(&tape.logits, &labels).unwrap();
        let grads = engine.backward(&tape, &dl).unwrap();
        let LayerParams::Readout(g) = &grads[0] else { panic!() };
        let LayerParams::Readout(p) = &net.layers()[0] else { panic!() };
        for o in 0..2 {
            let mut db = 0.0;
            for n in 0..5 {
                let z: Vec<f64> = (0..2)
                    .map(|k| p.bias.data()[k] + (0..3).map(|f| p.weight.data()[k * 3 + f] * x.data()[n * 3 + f]).sum::<f64>())
                    .collect();
                let sm = z[o].exp() / (z[0].exp() + z[1].exp());
                let r = (sm - if labels[n] == o { 1.0 } else { 0.0 }) / 5.0;
                db += r;
            }
            assert!((g.bias.data()[o] - db).abs() <= 1e-9);
            for f in 0..3 {
                let dw: f64 = (0..5)
                    .map(|n| {
                        let z: Vec<f64> = (0..2)
                            .map(|k| p.bias.data()[k] + (0..3).map(|j| p.weight.data()[k * 3 + j] * x.data()[n * 3 + j]).sum::<f64>())
                            .collect();
                        let sm = z[o].exp() / (z[0].exp() + z[1].exp());
                        (sm - if labels[n] == o { 1.0 } else { 0.0 }) / 5.0 * x.data()[n * 3 + f]
                    })
                    .sum();
                assert!((g.weight.data()[o * 3 + f] - dw).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hard_reset_bptt_matches_frozen_mask_relaxation() {
        // With the masks and surrogate slopes frozen, the neuron is the
        // linear recurrence a_t = decay * keep_{t-1} * a_{t-1} + x_t with
        // output slope * a_t.
        let cfg = NeuronConfig::lif(0.6, 4.0, BitFormat::new(2, 1).unwrap());
        let spec = presets::mlp(2, &[], 2, presets::Activation::Relu, false, 5);
        let net = Network::init(spec, 1).unwrap();
        let engine = Engine::new(&net, BnMode::Train, SurrogateConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[5 * 3, 4], 0.8, &mut rng);
        let (_, cache) = engine.neuron_forward(&x, &cfg).unwrap();
        assert!(cache.keep.contains(&0.0) && cache.keep.contains(&1.0));
        let g = Tensor::randn(x.shape(), 1.0, &mut rng);
        let dx = neuron_backward(&cache, &g, 5).unwrap();
        let relaxed = |x: &Tensor| -> f64 {
            let per = 12;
            let mut u = vec![cfg.initial_potential; per];
            let mut total = 0.0;
            for t in 0..5 {
                for i in 0..per {
                    let j = t * per + i;
                    let a = cfg.decay() * u[i] + x.data()[j];
                    total += g.data()[j] * cache.surrogate[j] * a;
                    u[i] = a * cache.keep[j];
                }
            }
            total
        };
        assert!(fd_check(&x, &dx, relaxed) <= 1e-4);
    }

    #[test]
    fn eval_engine_equals_time_stepped_forward() {
        let cfg = NeuronConfig::lif(0.6, 4.0, BitFormat::new(2, 1).unwrap());
        let spec = presets::resnet8_slim(&[1, 4, 4], 3, cfg, 4, [4, 4, 8], 3, true);
        let mut net = Network::init(spec, 11).unwrap();
        for (tag, t) in net.tensors_mut() {
            if tag == crate::network::TensorTag::RunningMean {
                t.data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 1, 4, 4], 1.0, &mut rng);
        let tape = Engine::new(&net, BnMode::Eval, SurrogateConfig::default(), 4).forward(&x).unwrap();
        let fwd = forward_timesteps(&net, &x, &ForwardOptions::default()).unwrap();
        assert_eq!(tape.logits, fwd.logits);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = presets::mlp(2, &[3], 2, presets::Activation::Relu, true, 1);
        let mut net = Network::init(spec, 2).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let tape = Engine::new(&net, BnMode::Train, SurrogateConfig::default(), 1).forward(&x).unwrap();
        let LayerParams::Linear(l) = &net.layers()[0] else { panic!() };
        let h = linear(&x, &l.weight, &l.bias).unwrap();
        update_running_stats(&mut net, &tape, 0.1);
        let LayerParams::BatchNorm(bn) = &net.layers()[1] else { panic!() };
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|n| h.data()[n * 3 + c]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
            assert!((bn.running_mean.data()[c] - 0.1 * m).abs() < 1e-12);
            assert!((bn.running_var.data()[c] - (0.9 + 0.1 * v)).abs() < 1e-12);
        }
    }
}
