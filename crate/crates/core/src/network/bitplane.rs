//! Accumulate-only convolution over multi-bit spikes.
//!
//! A multi-bit spike is a weighted sum of binary bit planes. Scaling the
//! kernel once per plane by that plane's power-of-two weight moves the
//! multiplication into the parameters, so inference over spikes only ever
//! adds kernel entries.

use crate::error::{Error, Result};
use crate::neuron::{BitFormat, SpikeTensor};
use crate::tensor::{Conv2dParams, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneKernel {
    pub exponent: i32,
    /// `2^exponent * W`.
    pub weight: Tensor,
}

/// Per-bit-plane kernels for one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BitPlaneConv {
    pub format: BitFormat,
    /// Most significant plane first.
    pub planes: Vec<PlaneKernel>,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl BitPlaneConv {
    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }
}

pub fn absorb_bit_weights(conv: &Conv2dParams, format: BitFormat) -> BitPlaneConv {
    let planes = format
        .bit_exponents()
        .map(|e| PlaneKernel {
            exponent: e,
            weight: conv.weight.scale((e as f64).exp2()),
        })
        .collect();
    BitPlaneConv {
        format,
        planes,
        bias: conv.bias.clone(),
        stride: conv.stride,
        padding: conv.padding,
    }
}

/// For every input coordinate along one axis, the `(tap, output)` pairs it
/// feeds.
pub(crate) fn reach(len_in: usize, k: usize, stride: usize, pad: usize, len_out: usize) -> Vec<Vec<(usize, usize)>> {
    (0..len_in)
        .map(|i| {
            (0..k)
                .filter_map(|tap| {
                    let num = i as isize + pad as isize - tap as isize;
                    if num < 0 || num % stride as isize != 0 {
                        return None;
                    }
                    let o = (num / stride as isize) as usize;
                    (o < len_out).then_some((tap, o))
                })
                .collect()
        })
        .collect()
}

/// Scatters kernel columns for every set bit. Returns the output and the
/// number of additions performed (bias initialisation excluded).
pub fn accumulate_conv(spikes: &SpikeTensor, conv: &BitPlaneConv) -> Result<(Tensor, u64)> {
    if spikes.format() != conv.format {
        return Err(Error::invalid(format!(
            "spikes in format {} but kernels absorbed for {}",
            spikes.format(),
            conv.format
        )));
    }
    let (n, c_in, h, w) = match spikes.shape()[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("accumulate_conv", "[N, C, H, W]", format!("{:?}", spikes.shape()))),
    };
    let first = conv
        .planes
        .first()
        .ok_or_else(|| Error::invalid("no bit planes"))?;
    let (c_out, wc_in, kh, kw) = first.weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::shape("accumulate_conv", format!("{wc_in} input channels"), c_in));
    }
    let geom = Conv2dParams {
        weight: Tensor::zeros(&[1, 1, kh, kw]),
        bias: Tensor::zeros(&[1]),
        stride: conv.stride,
        padding: conv.padding,
    };
    let (oh, ow) = geom.output_extent(h, w)?;
    let ry = reach(h, kh, conv.stride, conv.padding, oh);
    let rx = reach(w, kw, conv.stride, conv.padding, ow);

    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for oc in 0..c_out {
            let b = conv.bias.data()[oc];
            out[(ni * c_out + oc) * oh * ow..(ni * c_out + oc + 1) * oh * ow]
                .iter_mut()
                .for_each(|v| *v = b);
        }
    }
    let nfrac = conv.format.frac_bits() as i32;
    let codes = spikes.codes();
    let mut adds = 0u64;
    for plane in &conv.planes {
        let shift = (plane.exponent + nfrac) as u32;
        let wt = plane.weight.data();
        for ni in 0..n {
            for ic in 0..c_in {
                for iy in 0..h {
                    for ix in 0..w {
                        let code = codes[((ni * c_in + ic) * h + iy) * w + ix];
                        if (code >> shift) & 1 == 0 {
                            continue;
                        }
                        for oc in 0..c_out {
                            let obase = (ni * c_out + oc) * oh;
                            let wbase = (oc * c_in + ic) * kh;
                            for &(ky, oy) in &ry[iy] {
                                for &(kx, ox) in &rx[ix] {
                                    out[(obase + oy) * ow + ox] += wt[(wbase + ky) * kw + kx];
                                    adds += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c_out, oh, ow], out)?, adds))
}
