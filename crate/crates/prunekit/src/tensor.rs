//! Dense row-major tensors of 32-bit floats.
//!
//! Layout is fixed to (batch N, channel C, height H, width W); lower-rank
//! tensors use a prefix of those axes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from explicit contents, checking the shape/data invariant.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("all extents must be >= 1: {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Standard normal draws scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gauss(rng) * std).collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
    }

    /// Uniform draws in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("rand_uniform: invalid shape")
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of axis `i`, or 1 when the tensor has fewer axes.
    pub fn extent(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    /// Interpret as (N, C, H, W), padding missing trailing axes with 1.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        (self.extent(0), self.extent(1), self.extent(2), self.extent(3))
    }

    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "scalar() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference against `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Box-Muller transform; two uniforms in, one normal out.
fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Relative gap |a - b| / max(|a|, |b|, floor); used across equivalence tests.
pub fn rel_err(a: f32, b: f32, floor: f32) -> f32 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_data_invariant_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(Tensor::new(&[0, 3], vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[2, 3, 4, 4], 0.5, &mut r1);
        let b = Tensor::randn(&[2, 3, 4, 4], 0.5, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dims4_pads_missing_axes() {
        let t = Tensor::zeros(&[5, 7]);
        assert_eq!(t.dims4(), (5, 7, 1, 1));
    }
}
