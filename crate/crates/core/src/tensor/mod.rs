//! Dense row-major `f64` tensors, per-channel statistics and seeded fills.
//!
//! Feature maps are stored channel-major as `[c, h, w]` so every per-channel
//! reduction walks a contiguous slice.

mod format;
mod rng;

pub use format::{read_tensor, read_tensor_file, write_tensor, write_tensor_file};
pub use rng::SeededRng;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Internal constructor for kernels whose output is finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(c, h, w)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected rank 3 [c,h,w], got {:?}",
                self.shape
            ))),
        }
    }

    /// Contiguous plane of channel `k` in a `[c, h, w]` tensor.
    pub fn channel(&self, k: usize) -> &[f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &self.data[k * plane..(k + 1) * plane]
    }

    pub(crate) fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &mut self.data[k * plane..(k + 1) * plane]
    }

    pub fn at3(&self, k: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(k * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: f64) -> Result<Self> {
        self.map(|v| alpha * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot of mismatched shapes"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and population (1/N) standard deviation of every channel of a
/// `[c, h, w]` tensor, accumulated with Welford's update.
pub fn channel_stats(f: &Tensor) -> Result<ChannelStats> {
    let (c, _, _) = f.dims3()?;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for k in 0..c {
        let (mean, var) = welford(f.channel(k));
        mu.push(mean);
        sigma.push(var.sqrt());
    }
    Ok(ChannelStats { mu, sigma })
}

fn welford(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    // A constant channel gives m2 == 0 exactly; clamp rounding residue anyway.
    (mean, (m2 / values.len() as f64).max(0.0))
}

/// Unit-norm copy of a rank-1 tensor.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::shape(format!("expected a vector, got {:?}", v.shape)));
    }
    let data = normalize_slice(v.data())?;
    Tensor::new(v.shape.clone(), data)
}

pub(crate) fn normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("vector has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Value distribution for [`rng_fill`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fill {
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    /// Normal with mean 0.
    Normal { std: f64 },
}

/// Deterministic tensor drawn from a fresh [`SeededRng`] stream.
pub fn rng_fill(shape: &[usize], seed: u64, dist: Fill) -> Result<Tensor> {
    let mut rng = SeededRng::new(seed);
    rng_fill_from(shape, &mut rng, dist)
}

/// Like [`rng_fill`] but continues an existing stream.
pub fn rng_fill_from(shape: &[usize], rng: &mut SeededRng, dist: Fill) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!("invalid shape {shape:?}")));
    }
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| match dist {
            Fill::Uniform { half_width } => rng.uniform(-half_width, half_width),
            Fill::Normal { std } => rng.normal(0.0, std),
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
