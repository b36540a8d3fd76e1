//! Dense `channels x height x width` grids of `f64`.
//!
//! A [`LatentGrid`] holds every latent state of the sampler as well as the
//! final image; the decoder operates on those grids directly.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::param(format!(
                "grid dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Shape {
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A latent (or image) grid. The shape is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Shape,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(shape: Shape) -> Self {
        LatentGrid {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        LatentGrid {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape {
                expected: format!("{shape} ({} values)", shape.len()),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite grid value at index {pos}")));
        }
        Ok(LatentGrid { shape, values })
    }

    /// I.i.d. standard normal entries scaled by `std`.
    pub fn gaussian<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let values = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        LatentGrid { shape, values }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.shape.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.index(c, y, x);
        self.values[i] = v;
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Biased sample variance over all elements.
    pub fn variance(&self) -> f64 {
        variance(&self.values)
    }

    pub fn dot(&self, other: &LatentGrid) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> LatentGrid {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + factor * other`, elementwise.
    pub fn add_scaled(&mut self, factor: f64, other: &LatentGrid) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> LatentGrid {
        debug_assert_eq!(self.shape, other.shape);
        LatentGrid {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_squared_diff(&self, other: &LatentGrid) -> f64 {
        let n = self.len() as f64;
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Biased sample covariance.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot(a, b) / (na * nb)
}

/// `||a - b|| / ||b||`, with `b` taken as the reference.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let reference: f64 = dot(b, b);
    if reference == 0.0 {
        return diff.sqrt();
    }
    (diff / reference).sqrt()
}
