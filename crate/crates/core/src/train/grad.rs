//! Hand-written backward passes for the differentiable layers.

use crate::error::{Error, Result};
use crate::network::eca_weights;
use crate::tensor::{global_avg_pool, valid_taps, BatchNormParams, Conv2dParams, Tensor};

/// Gradients of `conv2d` w.r.t. input, weight and bias.
pub fn conv2d_backward(x: &Tensor, p: &Conv2dParams, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, oh, ow) = p.check_input(x)?;
    let (n, c_in, _, _) = x.dims4()?;
    let c_out = p.out_channels();
    if dy.shape() != [n, c_out, oh, ow] {
        return Err(Error::shape("conv2d_backward", format!("[{n}, {c_out}, {oh}, {ow}]"), format!("{:?}", dy.shape())));
    }
    let (kh, kw) = p.kernel();
    let (s, pad) = (p.stride, p.padding);
    let xd = x.data();
    let wd = p.weight.data();
    let g = dy.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; p.weight.len()];
    let mut db = vec![0.0; c_out];
    let ty: Vec<_> = (0..oh).map(|o| valid_taps(o, s, pad, kh, h)).collect();
    let tx: Vec<_> = (0..ow).map(|o| valid_taps(o, s, pad, kw, w)).collect();
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                let (ky0, ky1) = ty[oy];
                for ox in 0..ow {
                    let gv = g[((ni * c_out + oc) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    db[oc] += gv;
                    let (kx0, kx1) = tx[ox];
                    for ic in 0..c_in {
                        let xbase = (ni * c_in + ic) * h;
                        let wbase = (oc * c_in + ic) * kh;
                        for ky in ky0..ky1 {
                            let iy = oy * s + ky - pad;
                            let xrow = (xbase + iy) * w;
                            let wrow = (wbase + ky) * kw;
                            for kx in kx0..kx1 {
                                let ix = ox * s + kx - pad;
                                dw[wrow + kx] += gv * xd[xrow + ix];
                                dx[xrow + ix] += gv * wd[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(p.weight.shape().to_vec(), dw)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

/// Gradients of the same-length `conv1d` w.r.t. input and kernel.
pub fn conv1d_backward(x: &Tensor, kernel: &Tensor, padding: usize, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c) = match x.shape()[..] {
        [n, 1, c] => (n, c),
        _ => return Err(Error::shape("conv1d_backward", "[N, 1, C]", format!("{:?}", x.shape()))),
    };
    if dy.shape() != x.shape() {
        return Err(Error::shape("conv1d_backward", format!("{:?}", x.shape()), format!("{:?}", dy.shape())));
    }
    let kv = kernel.data();
    let mut dx = vec![0.0; n * c];
    let mut dk = vec![0.0; kv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let gv = dy.data()[ni * c + ci];
            for (j, &kj) in kv.iter().enumerate() {
                let src = ci as isize + j as isize - padding as isize;
                if src >= 0 && (src as usize) < c {
                    dk[j] += gv * x.data()[ni * c + src as usize];
                    dx[ni * c + src as usize] += gv * kj;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(kernel.shape().to_vec(), dk)?))
}

/// Gradients of `linear` w.r.t. input, weight and bias.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = x.dims2()?;
    let (o, wf) = weight.dims2()?;
    if wf != f || dy.shape() != [n, o] {
        return Err(Error::shape("linear_backward", format!("[{n}, {o}]"), format!("{:?}", dy.shape())));
    }
    let (xd, wd, g) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![0.0; n * f];
    let mut dw = vec![0.0; o * f];
    let mut db = vec![0.0; o];
    for ni in 0..n {
        let row = &xd[ni * f..(ni + 1) * f];
        let drow = &mut dx[ni * f..(ni + 1) * f];
        for oi in 0..o {
            let gv = g[ni * o + oi];
            if gv == 0.0 {
                continue;
            }
            db[oi] += gv;
            let wrow = &wd[oi * f..(oi + 1) * f];
            let dwrow = &mut dw[oi * f..(oi + 1) * f];
            for k in 0..f {
                dwrow[k] += gv * row[k];
                drow[k] += gv * wrow[k];
            }
        }
    }
    Ok((Tensor::new(vec![n, f], dx)?, Tensor::new(vec![o, f], dw)?, Tensor::new(vec![o], db)?))
}

/// Saved state of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Batch mean and unbiased batch variance, for the running averages.
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch norm normalising with the statistics of `x` itself, over every
/// axis but the channel axis.
pub fn batchnorm_train_forward(x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BnCache)> {
    let (n, c, hw) = x.channel_dims()?;
    if c != p.channels() {
        return Err(Error::shape("batchnorm_train_forward", format!("{} channels", p.channels()), c));
    }
    let m = (n * hw) as f64;
    if n * hw < 2 {
        return Err(Error::invalid("training-mode batch norm needs at least two values per channel"));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            mean[ci] += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for ni in 0..n {
        for ci in 0..c {
            var[ci] += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + p.eps).sqrt()).collect();
    let var_unbiased = var.iter().map(|v| v / (m - 1.0)).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let (g, b) = (p.gamma.data(), p.beta.data());
    for ni in 0..n {
        for ci in 0..c {
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                y[i] = g[ci] * xhat[i] + b[ci];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            gamma: g.to_vec(),
            mean,
            var_unbiased,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward(cache: &BnCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, hw) = cache.xhat.channel_dims()?;
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::shape("batchnorm_train_backward", format!("{:?}", cache.xhat.shape()), format!("{:?}", dy.shape())));
    }
    let m = (n * hw) as f64;
    let (xh, g) = (cache.xhat.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                dgamma[ci] += g[i] * xh[i];
                dbeta[ci] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let k = cache.gamma[ci] * cache.inv_std[ci] / m;
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                dx[i] = k * (m * g[i] - dbeta[ci] - xh[i] * dgamma[ci]);
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Backward of inference-mode `batchnorm_apply`; returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_eval_backward(x: &Tensor, p: &BatchNormParams, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, hw) = x.channel_dims()?;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (p.running_var.data()[ci] + p.eps).sqrt();
            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                let gv = dy.data()[i];
                dx[i] = gv * p.gamma.data()[ci] * inv;
                dgamma[ci] += gv * (x.data()[i] - p.running_mean.data()[ci]) * inv;
                dbeta[ci] += gv;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Spreads `[N, C]` gradients evenly over `[N, C, H, W]`.
pub fn global_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let hw: usize = in_shape[2..].iter().product();
    let mut dx = Vec::with_capacity(dy.len() * hw);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Backward of `y = x * eca_weights(x, kernel)`; returns `(dx, dkernel)`.
pub fn eca_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let gate = eca_weights(x, kernel)?;
    let mut dx = vec![0.0; x.len()];
    let mut dgate = vec![0.0; n * c];
    for i in 0..n * c {
        let gv = gate.data()[i];
        for j in i * hw..(i + 1) * hw {
            dx[j] = dy.data()[j] * gv;
            dgate[i] += dy.data()[j] * x.data()[j];
        }
    }
    let dmixed: Vec<f64> = dgate
        .iter()
        .zip(gate.data())
        .map(|(d, g)| d * g * (1.0 - g))
        .collect();
    let pooled = global_avg_pool(x)?.reshape(&[n, 1, c])?;
    let k = kernel.len();
    let (dpooled, dk) = conv1d_backward(&pooled, kernel, (k - 1) / 2, &Tensor::new(vec![n, 1, c], dmixed)?)?;
    for (i, d) in dpooled.data().iter().enumerate() {
        for j in i * hw..(i + 1) * hw {
            dx[j] += d / hw as f64;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dk))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", format!("{n} labels"), labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (ni, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - max).exp() / z;
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}
