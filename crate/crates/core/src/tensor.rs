//! Dense row-major tensor of finite `f32` values.
//!
//! Storage is 32-bit; every reduction is accumulated in 64-bit and in flat
//! index order, so repeated runs are bit-identical. There is no broadcasting:
//! any shape disagreement is an error.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("empty shape list".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "dimension {pos} of {shape:?} is zero"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

impl Tensor {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn new(shape: &[usize], fill: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        if !fill.is_finite() {
            return Err(Error::NonFiniteValue(format!("fill value {fill}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("element {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rounds 64-bit values into a new tensor; fails if any rounded value is not finite.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Point on the straight line from `baseline` (alpha = 0) to `self` (alpha = 1).
    pub fn path_point(&self, baseline: &Tensor, alpha: f64) -> Result<Tensor> {
        self.ensure_same_shape(baseline)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
        }
        if alpha == 0.0 {
            return Ok(baseline.clone());
        }
        if alpha == 1.0 {
            return Ok(self.clone());
        }
        let data = self
            .data
            .iter()
            .zip(&baseline.data)
            .map(|(&x, &b)| {
                let (x, b) = (f64::from(x), f64::from(b));
                (b + alpha * (x - b)) as f32
            })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// 64-bit sum in flat index order.
    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc + f64::from(v))
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc + f64::from(v).abs())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a) - f64::from(b))
            .collect();
        Tensor::from_f64(&self.shape, &data)
    }

    pub fn neg(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    /// Largest elementwise absolute difference, in 64-bit.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max))
    }

    /// Hex SHA-256 over the shape and little-endian element bytes (first 16 hex digits).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &d in &self.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
