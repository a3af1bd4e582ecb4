//! Dense row-major `f64` tensors and the handful of layer primitives the
//! rest of the crate is built from.
//!
//! Every operation validates shapes up front and returns [`Error::Shape`]
//! before touching any data. There is no implicit broadcasting except for
//! the per-channel bias add inside `conv2d` and `linear`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {:?}", expected, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                fmt_shape(shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape("dims2", "rank 2", fmt_shape(&self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape("dims4", "rank 4", fmt_shape(&self.shape))),
        }
    }

    /// Views a rank-2 `[N, C]` or rank-4 `[N, C, H, W]` tensor as
    /// `(N, C, H*W)`.
    pub fn channel_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::shape(
                "channel_dims",
                "rank 2 or 4",
                fmt_shape(&self.shape),
            )),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                fmt_shape(&self.shape),
                fmt_shape(&other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_outer", "rank >= 1", "scalar"))?;
        if start > end || end > outer {
            return Err(Error::shape(
                "slice_outer",
                format!("range within 0..{outer}"),
                format!("{start}..{end}"),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_outer(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_outer needs at least one tensor"))?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "stack_outer",
                    fmt_shape(&first.shape),
                    fmt_shape(&p.shape),
                ));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Tensor { shape, data })
    }

    /// Picks rows by index along the leading axis.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Tensor> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("gather_outer", "rank >= 1", "scalar"))?;
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(Error::invalid(format!("row {r} out of range 0..{outer}")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_c, _, kh, kw) = weight.dims4()?;
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv kernel extents must be >= 1"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if bias.shape() != [out_c] {
            return Err(Error::shape(
                "Conv2dParams::new",
                format!("bias [{out_c}]"),
                fmt_shape(bias.shape()),
            ));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2dParams {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("padded extent >= kernel {k}"),
                    padded,
                ));
            }
            if !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("(extent + 2*pad - k) divisible by stride {}", self.stride),
                    format!("extent {len}, pad {}, k {k}", self.padding),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((extent(h, kh)?, extent(w, kw)?))
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", self.in_channels()),
                c,
            ));
        }
        let (oh, ow) = self.output_extent(h, w)?;
        let _ = n;
        Ok((h, w, oh, ow))
    }
}

/// Kernel taps `[lo, hi)` that land inside an input axis of length `len`
/// for output coordinate `o`.
#[inline]
pub(crate) fn valid_taps(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let base = (o * stride) as isize - pad as isize;
    let lo = (-base).max(0) as usize;
    let hi = ((len as isize - base).min(k as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Direct-loop 2-D cross-correlation.
pub fn conv2d(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    let (h, w, oh, ow) = params.check_input(input)?;
    let (n, c_in, _, _) = input.dims4()?;
    let c_out = params.out_channels();
    let (kh, kw) = params.kernel();
    let (s, p) = (params.stride, params.padding);
    let x = input.data();
    let wt = params.weight.data();
    let b = params.bias.data();

    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                let (ky0, ky1) = valid_taps(oy, s, p, kh, h);
                for ox in 0..ow {
                    let (kx0, kx1) = valid_taps(ox, s, p, kw, w);
                    let mut acc = b[oc];
                    for ic in 0..c_in {
                        let xbase = (ni * c_in + ic) * h;
                        let wbase = (oc * c_in + ic) * kh;
                        for ky in ky0..ky1 {
                            let iy = oy * s + ky - p;
                            let xrow = (xbase + iy) * w;
                            let wrow = (wbase + ky) * kw;
                            for kx in kx0..kx1 {
                                let ix = ox * s + kx - p;
                                acc += wt[wrow + kx] * x[xrow + ix];
                            }
                        }
                    }
                    out[((ni * c_out + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// Lowers each sample to a patch matrix and multiplies it against the
/// weight matrix in output-channel blocks. Agrees with [`conv2d`] to
/// rounding.
pub fn conv2d_blocked(input: &Tensor, params: &Conv2dParams) -> Result<Tensor> {
    const BLOCK: usize = 8;
    let (h, w, oh, ow) = params.check_input(input)?;
    let (n, c_in, _, _) = input.dims4()?;
    let c_out = params.out_channels();
    let (kh, kw) = params.kernel();
    let (s, p) = (params.stride, params.padding);
    let patch = c_in * kh * kw;
    let positions = oh * ow;
    let x = input.data();
    let wt = params.weight.data();
    let b = params.bias.data();

    let mut cols = vec![0.0; patch * positions];
    let mut out = vec![0.0; n * c_out * positions];
    for ni in 0..n {
        cols.iter_mut().for_each(|v| *v = 0.0);
        for ic in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ic * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row * positions + oy * ow + ox] =
                                x[((ni * c_in + ic) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        for oc0 in (0..c_out).step_by(BLOCK) {
            let oc1 = (oc0 + BLOCK).min(c_out);
            for oc in oc0..oc1 {
                let dst = &mut out[(ni * c_out + oc) * positions..(ni * c_out + oc + 1) * positions];
                dst.iter_mut().for_each(|v| *v = b[oc]);
                for r in 0..patch {
                    let wv = wt[oc * patch + r];
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &cols[r * positions..(r + 1) * positions];
                    for (d, &xv) in dst.iter_mut().zip(src) {
                        *d += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// Same-length 1-D cross-correlation along the last axis of a
/// `[N, 1, C]` tensor, zero padded.
pub fn conv1d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, one, c) = match input.shape()[..] {
        [n, one, c] => (n, one, c),
        _ => return Err(Error::shape("conv1d", "[N, 1, C]", fmt_shape(input.shape()))),
    };
    if one != 1 {
        return Err(Error::shape("conv1d", "[N, 1, C]", fmt_shape(input.shape())));
    }
    let k = match kernel.shape()[..] {
        [k] => k,
        _ => return Err(Error::shape("conv1d", "kernel [k]", fmt_shape(kernel.shape()))),
    };
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv1d kernel length must be odd, got {k}")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::invalid(format!(
            "conv1d padding must be {} for kernel {k}, got {padding}",
            (k - 1) / 2
        )));
    }
    let x = input.data();
    let kv = kernel.data();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        let row = &x[ni * c..(ni + 1) * c];
        for ci in 0..c {
            let mut acc = 0.0;
            for (j, &kj) in kv.iter().enumerate() {
                let src = ci as isize + j as isize - padding as isize;
                if src >= 0 && (src as usize) < c {
                    acc += kj * row[src as usize];
                }
            }
            out[ni * c + ci] = acc;
        }
    }
    Tensor::new(vec![n, 1, c], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNormParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape("BatchNormParams", format!("{name} [{c}]"), fmt_shape(t.shape())));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batchnorm running_var must be >= 0"));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::invalid("batchnorm eps must be >= 0"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let inv = 1.0 / (self.running_var.data()[i] + self.eps).sqrt();
            let a = self.gamma.data()[i] * inv;
            scale.push(a);
            shift.push(self.beta.data()[i] - a * self.running_mean.data()[i]);
        }
        (scale, shift)
    }
}

/// Inference-mode batch norm using running statistics. Accepts `[N, C]`
/// or `[N, C, H, W]`.
pub fn batchnorm_apply(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    params.validate()?;
    let (n, c, hw) = input.channel_dims()?;
    if c != params.channels() {
        return Err(Error::shape("batchnorm_apply", format!("{} channels", params.channels()), c));
    }
    let g = params.gamma.data();
    let be = params.beta.data();
    let m = params.running_mean.data();
    let v = params.running_var.data();
    let mut out = input.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let denom = (v[ci] + params.eps).sqrt();
            let chunk = &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for x in chunk {
                *x = g[ci] * (*x - m[ci]) / denom + be[ci];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Folds an inference-mode batch norm into the preceding convolution.
pub fn fold_bn_into_conv(conv: &Conv2dParams, bn: &BatchNormParams) -> Result<Conv2dParams> {
    bn.validate()?;
    let c_out = conv.out_channels();
    if bn.channels() != c_out {
        return Err(Error::shape("fold_bn_into_conv", format!("{c_out} channels"), bn.channels()));
    }
    let (scale, shift) = bn.affine();
    let per = conv.weight.len() / c_out.max(1);
    let mut w = conv.weight.data().to_vec();
    for (oc, chunk) in w.chunks_mut(per.max(1)).enumerate().take(c_out) {
        chunk.iter_mut().for_each(|x| *x *= scale[oc]);
    }
    let b: Vec<f64> = (0..c_out)
        .map(|oc| conv.bias.data()[oc] * scale[oc] + shift[oc])
        .collect();
    Conv2dParams::new(
        Tensor::new(conv.weight.shape().to_vec(), w)?,
        Tensor::new(vec![c_out], b)?,
        conv.stride,
        conv.padding,
    )
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool", "H, W >= 1", fmt_shape(input.shape())));
    }
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|chunk| chunk.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

/// Concatenates along axis 1. Works for rank-2 and rank-4 tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.rank() < 2 || a.shape()[0] != b.shape()[0] || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::shape("concat_channels", fmt_shape(a.shape()), fmt_shape(b.shape())));
    }
    let n = a.shape()[0];
    let inner: usize = a.shape()[2..].iter().product();
    let (ca, cb) = (a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * inner..(ni + 1) * ca * inner]);
        data.extend_from_slice(&b.data()[ni * cb * inner..(ni + 1) * cb * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::new(shape, data)
}

/// Inverse of [`concat_channels`]: splits axis 1 at `at`.
pub fn split_channels(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    if x.rank() < 2 || at > x.shape()[1] {
        return Err(Error::shape("split_channels", format!("axis 1 >= {at}"), fmt_shape(x.shape())));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut a = Vec::with_capacity(n * at * inner);
    let mut b = Vec::with_capacity(n * (c - at) * inner);
    for ni in 0..n {
        let row = &x.data()[ni * c * inner..(ni + 1) * c * inner];
        a.extend_from_slice(&row[..at * inner]);
        b.extend_from_slice(&row[at * inner..]);
    }
    let mut sa = x.shape().to_vec();
    sa[1] = at;
    let mut sb = x.shape().to_vec();
    sb[1] = c - at;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

/// `input . weight^T + bias` for `input: [N, F]`, `weight: [O, F]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f) = input.dims2()?;
    let (o, wf) = weight.dims2()?;
    if wf != f {
        return Err(Error::shape("linear", format!("{wf} input features"), f));
    }
    if bias.shape() != [o] {
        return Err(Error::shape("linear", format!("bias [{o}]"), fmt_shape(bias.shape())));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * o);
    for ni in 0..n {
        let row = &x[ni * f..(ni + 1) * f];
        for oi in 0..o {
            let wrow = &w[oi * f..(oi + 1) * f];
            let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(dot + bias.data()[oi]);
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Multiplies each channel plane by a per-`(sample, channel)` gate:
/// `x: [N, C, ...]`, `gate: [N, C]`.
pub fn scale_channels(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (n, c, hw) = x.channel_dims()?;
    if gate.shape() != [n, c] {
        return Err(Error::shape("scale_channels", format!("gate [{n}, {c}]"), fmt_shape(gate.shape())));
    }
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(hw.max(1)).enumerate().take(n * c) {
        let g = gate.data()[i];
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
