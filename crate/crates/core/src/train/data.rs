//! Datasets: seeded synthetic sets and the IDX file format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::shape("Dataset", format!("[{}, ...]", labels.len()), format!("{:?}", inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Dataset> {
        Dataset::new(
            self.inputs.gather_outer(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            split,
        )
    }

    /// Seeded shuffle into train and test parts; the test part holds
    /// `round(test_fraction * N)` samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction must be in [0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train, Split::Train)?, self.subset(test, Split::Test)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic clusters with means spread on a circle of radius 5.
    GaussianBlobs,
    /// Interleaved spiral arms, one per class.
    TwoSpirals,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs),
            "two_spirals" => Ok(SyntheticKind::TwoSpirals),
            _ => Err(Error::invalid(format!("unknown dataset kind {s:?}"))),
        }
    }
}

/// Two-dimensional points with round-robin labels, `inputs: [n, 2]`.
pub fn gen_synthetic_dataset(kind: SyntheticKind, n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    match kind {
        SyntheticKind::GaussianBlobs => {
            let noise = Normal::new(0.0, 0.5).expect("valid std");
            for &c in &labels {
                let phi = std::f64::consts::TAU * c as f64 / classes as f64;
                data.push(5.0 * phi.cos() + noise.sample(&mut rng));
                data.push(5.0 * phi.sin() + noise.sample(&mut rng));
            }
        }
        SyntheticKind::TwoSpirals => {
            for &c in &labels {
                let r: f64 = rand::Rng::gen_range(&mut rng, 0.05..1.0);
                let theta = 1.75 * std::f64::consts::TAU * r + std::f64::consts::TAU * c as f64 / classes as f64;
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                data.push(r * theta.cos() + 0.02 * e1);
                data.push(r * theta.sin() + 0.02 * e2);
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, classes, Split::Train)
}

const IDX_UBYTE: u8 = 0x08;
/// Upper bound on the element count of an IDX file we are willing to load.
const IDX_MAX_ELEMENTS: usize = 1 << 31;

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Parse("IDX: truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse(format!("IDX: bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Parse(format!("IDX: unsupported element type 0x{:02x}", bytes[2])));
    }
    let nd = bytes[3] as usize;
    if nd == 0 {
        return Err(Error::Parse("IDX: zero dimensions".into()));
    }
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(Error::Parse("IDX: truncated header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= IDX_MAX_ELEMENTS)
        .ok_or_else(|| Error::Parse(format!("IDX: dimensions {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Parse(format!("IDX: expected {count} data bytes, found {}", payload.len())));
    }
    Ok(IdxArray { dims, data: payload.to_vec() })
}

pub fn write_idx(arr: &IdxArray) -> Result<Vec<u8>> {
    if arr.dims.is_empty() || arr.dims.len() > 255 || arr.dims.iter().product::<usize>() != arr.data.len() {
        return Err(Error::invalid("IDX: dims do not match data"));
    }
    let mut out = vec![0, 0, IDX_UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX: dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

/// Loads an image file (`[N, ...]`) and a label file (`[N]`). Pixels are
/// scaled to `[0, 1]`; rank-3 images get a channel axis, `[N, 1, H, W]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(&std::fs::read(images).map_err(|e| Error::io_at(images, e))?)?;
    let lab = read_idx(&std::fs::read(labels).map_err(|e| Error::io_at(labels, e))?)?;
    if lab.dims.len() != 1 {
        return Err(Error::Parse(format!("IDX labels must be rank 1, got {:?}", lab.dims)));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Parse(format!("{} images but {} labels", img.dims[0], lab.dims[0])));
    }
    let mut shape = img.dims.clone();
    if shape.len() == 3 {
        shape.insert(1, 1);
    } else if shape.len() == 1 {
        shape.push(1);
    }
    let inputs = Tensor::new(shape, img.data.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes, Split::Train)
}
