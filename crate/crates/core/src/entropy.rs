//! Information lost when a Gaussian membrane potential is quantized into
//! multi-bit spikes.
//!
//! The spike distribution is computed two ways: analytically from the
//! normal CDF over the quantizer's bins, and by Monte-Carlo sampling
//! through [`quantize_code`], the same routine the neurons fire with.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::neuron::{quantize_code, BitFormat};

/// Gaussian membrane-potential distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MembraneDist {
    mean: f64,
    std: f64,
}

impl MembraneDist {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!("gaussian needs finite mean and std > 0, got ({mean}, {std})")));
        }
        Ok(MembraneDist { mean, std })
    }

    pub fn standard() -> Self {
        MembraneDist { mean: 0.0, std: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// `P(U < x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mean) / self.std)
    }

    /// `P(U >= x)`.
    pub fn sf(&self, x: f64) -> f64 {
        normal_sf((x - self.mean) / self.std)
    }
}

/// Standard normal CDF through libm's `erfc` (relative error about 1 ulp,
/// so absolute error well below 1e-15).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(z)` without cancellation for large `z`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikePmf {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl SpikePmf {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Probability of every spike code under `dist`. Bin `k` covers
/// `[k, k+1) * 2^-n * v_th`; the bottom bin is open below and the top bin
/// open above.
pub fn spike_pmf_analytic(dist: &MembraneDist, v_th: f64, format: BitFormat) -> Result<SpikePmf> {
    check_vth(v_th)?;
    let max = format.max_code();
    let edge = format.step() * v_th;
    let mut values = Vec::with_capacity(max as usize + 1);
    let mut probs = Vec::with_capacity(max as usize + 1);
    for k in 0..=max {
        let lo = (k > 0).then_some(k as f64 * edge);
        let hi = (k < max).then(|| (k + 1) as f64 * edge);
        let p = match (lo, hi) {
            (None, None) => 1.0,
            (None, Some(h)) => dist.cdf(h),
            (Some(l), None) => dist.sf(l),
            (Some(l), Some(h)) => {
                // Difference of whichever tail is smaller, to keep precision.
                if l >= dist.mean {
                    dist.sf(l) - dist.sf(h)
                } else {
                    dist.cdf(h) - dist.cdf(l)
                }
            }
        };
        values.push(format.value(k));
        probs.push(p.max(0.0));
    }
    Ok(SpikePmf { values, probs })
}

/// Empirical spike distribution from `samples` seeded draws pushed
/// through the neuron quantizer.
pub fn spike_pmf_mc(dist: &MembraneDist, v_th: f64, format: BitFormat, samples: u64, seed: u64) -> Result<SpikePmf> {
    check_vth(v_th)?;
    if samples == 0 {
        return Err(Error::invalid("Monte-Carlo needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; format.max_code() as usize + 1];
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = dist.mean + dist.std * z;
        counts[quantize_code(u, v_th, format) as usize] += 1;
    }
    Ok(SpikePmf {
        values: (0..=format.max_code()).map(|k| format.value(k)).collect(),
        probs: counts.iter().map(|&c| c as f64 / samples as f64).collect(),
    })
}

/// Shannon entropy in bits, `0 log 0 = 0`.
pub fn entropy_of_pmf(pmf: &SpikePmf) -> f64 {
    -pmf.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// Differential entropy of the Gaussian in bits, `0.5 log2(2 pi e std^2)`.
pub fn membrane_entropy_gaussian(dist: &MembraneDist) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * dist.std * dist.std).log2()
}

/// `H(U) - H(S)`: entropy lost going from membrane potential to spikes.
pub fn forward_loss(dist: &MembraneDist, v_th: f64, format: BitFormat) -> Result<f64> {
    let pmf = spike_pmf_analytic(dist, v_th, format)?;
    Ok(membrane_entropy_gaussian(dist) - entropy_of_pmf(&pmf))
}

/// The four formats compared in the bit-width entropy table, in order.
pub fn table1_formats() -> [BitFormat; 4] {
    [(1, 0), (2, 0), (1, 1), (2, 1)].map(|(m, n)| BitFormat::new(m, n).expect("valid"))
}

fn check_vth(v_th: f64) -> Result<()> {
    if !(v_th > 0.0) || !v_th.is_finite() {
        return Err(Error::invalid(format!("v_th must be positive, got {v_th}")));
    }
    Ok(())
}
