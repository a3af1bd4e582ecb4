//! Multi-bit LIF / IF neurons.
//!
//! A neuron emits an unsigned fixed-point spike with `m` integer and `n`
//! fractional bits instead of a single binary bit. Codes are stored as
//! integers; the real value of a code is `code * 2^-n`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-point spike format with `int_bits` integer and `frac_bits`
/// fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBitFormat", into = "RawBitFormat")]
pub struct BitFormat {
    int_bits: u32,
    frac_bits: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBitFormat {
    int_bits: u32,
    frac_bits: u32,
}

impl TryFrom<RawBitFormat> for BitFormat {
    type Error = Error;

    fn try_from(raw: RawBitFormat) -> Result<Self> {
        BitFormat::new(raw.int_bits, raw.frac_bits)
    }
}

impl From<BitFormat> for RawBitFormat {
    fn from(f: BitFormat) -> Self {
        RawBitFormat {
            int_bits: f.int_bits,
            frac_bits: f.frac_bits,
        }
    }
}

impl BitFormat {
    /// Widest supported code; keeps every value exact in `f32`.
    pub const MAX_TOTAL_BITS: u32 = 24;

    /// Classic binary spikes.
    pub const BINARY: BitFormat = BitFormat {
        int_bits: 1,
        frac_bits: 0,
    };

    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let total = int_bits.saturating_add(frac_bits);
        if total == 0 {
            return Err(Error::invalid("bit format needs at least one bit (m + n >= 1)"));
        }
        if total > Self::MAX_TOTAL_BITS {
            return Err(Error::invalid(format!(
                "bit format {int_bits}+{frac_bits} exceeds {} bits",
                Self::MAX_TOTAL_BITS
            )));
        }
        Ok(BitFormat {
            int_bits,
            frac_bits,
        })
    }

    pub fn int_bits(self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn max_code(self) -> u32 {
        (1u32 << self.total_bits()) - 1
    }

    /// Value of one code step, `2^-n`.
    pub fn step(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn value(self, code: u32) -> f64 {
        code as f64 * self.step()
    }

    /// Largest representable spike value.
    pub fn s_max(self) -> f64 {
        self.value(self.max_code())
    }

    /// Bit-plane weights from the most significant bit down:
    /// `2^(m-1), ..., 2^-n`.
    pub fn bit_weights(self) -> Vec<f64> {
        self.bit_exponents().map(|e| (e as f64).exp2()).collect()
    }

    pub fn bit_exponents(self) -> impl Iterator<Item = i32> {
        let hi = self.int_bits as i32 - 1;
        let lo = -(self.frac_bits as i32);
        (lo..=hi).rev()
    }
}

impl fmt::Display for BitFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.int_bits, self.frac_bits)
    }
}

/// Quantizes one membrane potential to a spike code:
/// `clamp(floor(u * 2^n / v_th), 0, 2^(m+n) - 1)`.
///
/// Interval boundaries are lower-inclusive. `NaN` maps to 0.
#[inline]
pub fn quantize_code(u: f64, v_th: f64, format: BitFormat) -> u32 {
    let level = (u * (format.frac_bits as f64).exp2() / v_th).floor();
    let max = format.max_code();
    if !(level >= 0.0) {
        0
    } else if level >= max as f64 {
        max
    } else {
        level as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// `u <- 0` wherever a nonzero code was emitted.
    Hard,
    /// `u <- u - value * v_th`.
    Subtract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leak {
    Leaky,
    None,
}

fn default_tau() -> f64 {
    4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    pub v_th: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub format: BitFormat,
    pub reset: ResetMode,
    pub leak: Leak,
    /// Membrane potential at `t = 0`.
    #[serde(default)]
    pub initial_potential: f64,
}

impl NeuronConfig {
    /// Multi-bit LIF with hard reset (direct training).
    pub fn lif(v_th: f64, tau: f64, format: BitFormat) -> Self {
        NeuronConfig {
            v_th,
            tau,
            format,
            reset: ResetMode::Hard,
            leak: Leak::Leaky,
            initial_potential: 0.0,
        }
    }

    /// Multi-bit IF with subtract reset, starting half a quantization step
    /// above rest: `u0 = 2^-n * v_th / 2`, i.e. `v_th / 2` when binary.
    pub fn conversion_if(v_th: f64, format: BitFormat) -> Self {
        NeuronConfig {
            v_th,
            tau: default_tau(),
            format,
            reset: ResetMode::Subtract,
            leak: Leak::None,
            initial_potential: format.step() * v_th / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(Error::invalid(format!("v_th must be positive, got {}", self.v_th)));
        }
        if self.leak == Leak::Leaky && !(self.tau > 1.0) {
            return Err(Error::invalid(format!("tau must exceed 1 for a leaky neuron, got {}", self.tau)));
        }
        if !self.initial_potential.is_finite() {
            return Err(Error::invalid("initial_potential must be finite"));
        }
        Ok(())
    }

    /// Per-step membrane retention factor.
    pub fn decay(&self) -> f64 {
        match self.leak {
            Leak::Leaky => 1.0 - 1.0 / self.tau,
            Leak::None => 1.0,
        }
    }
}

/// Integer spike codes plus their format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    codes: Vec<u32>,
    format: BitFormat,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<u32>, format: BitFormat) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != codes.len() {
            return Err(Error::shape("SpikeTensor::new", len, codes.len()));
        }
        if let Some(bad) = codes.iter().find(|&&c| c > format.max_code()) {
            return Err(Error::invalid(format!("spike code {bad} outside format {format}")));
        }
        Ok(SpikeTensor {
            shape,
            codes,
            format,
        })
    }

    pub fn zeros(shape: &[usize], format: BitFormat) -> Self {
        SpikeTensor {
            shape: shape.to_vec(),
            codes: vec![0; shape.iter().product()],
            format,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn format(&self) -> BitFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Real-valued view, `code * 2^-n`.
    pub fn values(&self) -> Tensor {
        let step = self.format.step();
        Tensor::new(
            self.shape.clone(),
            self.codes.iter().map(|&c| c as f64 * step).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn count_nonzero(&self) -> usize {
        self.codes.iter().filter(|&&c| c != 0).count()
    }

    /// Total number of set bits across all bit planes.
    pub fn count_set_bits(&self) -> u64 {
        self.codes.iter().map(|c| c.count_ones() as u64).sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.codes.len() {
            return Err(Error::shape("SpikeTensor::reshape", self.codes.len(), format!("{shape:?}")));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayerState {
    pub u: Tensor,
    pub last_spikes: SpikeTensor,
}

impl NeuronLayerState {
    /// Fresh state at `cfg.initial_potential` with no prior spikes.
    pub fn new(shape: &[usize], cfg: &NeuronConfig) -> Self {
        NeuronLayerState {
            u: Tensor::full(shape, cfg.initial_potential),
            last_spikes: SpikeTensor::zeros(shape, cfg.format),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.u.shape()
    }
}

/// `u <- decay * u + x`.
pub fn charge(mut state: NeuronLayerState, input: &Tensor, cfg: &NeuronConfig) -> Result<NeuronLayerState> {
    if state.u.shape() != input.shape() {
        return Err(Error::shape("charge", format!("{:?}", state.u.shape()), format!("{:?}", input.shape())));
    }
    let decay = cfg.decay();
    for (u, &x) in state.u.data_mut().iter_mut().zip(input.data()) {
        *u = decay * *u + x;
    }
    Ok(state)
}

pub fn fire_quantize(u: &Tensor, cfg: &NeuronConfig) -> SpikeTensor {
    let codes = u
        .data()
        .iter()
        .map(|&v| quantize_code(v, cfg.v_th, cfg.format))
        .collect();
    SpikeTensor {
        shape: u.shape().to_vec(),
        codes,
        format: cfg.format,
    }
}

pub fn reset(mut state: NeuronLayerState, spikes: &SpikeTensor, cfg: &NeuronConfig) -> Result<NeuronLayerState> {
    if state.u.shape() != spikes.shape() {
        return Err(Error::shape("reset", format!("{:?}", state.u.shape()), format!("{:?}", spikes.shape())));
    }
    match cfg.reset {
        ResetMode::Hard => {
            for (u, &c) in state.u.data_mut().iter_mut().zip(spikes.codes()) {
                if c > 0 {
                    *u = 0.0;
                }
            }
        }
        ResetMode::Subtract => {
            let fmt = spikes.format();
            for (u, &c) in state.u.data_mut().iter_mut().zip(spikes.codes()) {
                if c > 0 {
                    *u -= fmt.value(c) * cfg.v_th;
                }
            }
        }
    }
    state.last_spikes = spikes.clone();
    Ok(state)
}

/// Charge, fire, reset.
pub fn step(state: NeuronLayerState, input: &Tensor, cfg: &NeuronConfig) -> Result<(NeuronLayerState, SpikeTensor)> {
    let charged = charge(state, input, cfg)?;
    let spikes = fire_quantize(&charged.u, cfg);
    let after = reset(charged, &spikes, cfg)?;
    Ok((after, spikes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BitPlane {
    /// Power-of-two exponent of this plane's weight.
    pub exponent: i32,
    pub weight: f64,
    /// 0/1 entries, same shape as the spike tensor.
    pub bits: Tensor,
}

/// Splits spikes into binary planes, most significant first. The weighted
/// sum of the planes equals [`SpikeTensor::values`] exactly.
pub fn bit_decompose(spikes: &SpikeTensor) -> Vec<BitPlane> {
    let fmt = spikes.format();
    let n = fmt.frac_bits() as i32;
    fmt.bit_exponents()
        .map(|e| {
            let shift = (e + n) as u32;
            let bits = spikes
                .codes()
                .iter()
                .map(|&c| ((c >> shift) & 1) as f64)
                .collect();
            BitPlane {
                exponent: e,
                weight: (e as f64).exp2(),
                bits: Tensor::new(spikes.shape().to_vec(), bits).expect("same shape"),
            }
        })
        .collect()
}
