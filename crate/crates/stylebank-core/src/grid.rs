//! `LatentGrid`: an immutable channels × height × width array of finite
//! reals. Images travel through the whole system in this form (the toy
//! backbone works directly in pixel space), and so do derived feature grids.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    tensor: Tensor,
}

impl LatentGrid {
    /// Builds a grid, rejecting NaN/Inf entries and zero-sized dimensions.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                channels, height, width
            )));
        }
        let tensor = Tensor::from_vec(&[channels, height, width], data)?;
        if !tensor.all_finite() {
            return Err(invalid("grid entries must be finite (no NaN/Inf)"));
        }
        Ok(LatentGrid { tensor })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3();
        Self::new(c, h, w, tensor.data().to_vec())
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        LatentGrid { tensor: Tensor::zeros(&[channels, height, width]) }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.tensor.dims3();
        self.tensor.data()[(c * h + y) * w + x]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.tensor.same_shape(other.tensor())
    }

    /// Every entry clamped into `[0, 1]` — the decode step of the toy
    /// pixel-space backbone.
    pub fn clamp_unit(&self) -> LatentGrid {
        LatentGrid { tensor: self.tensor.map(|x| x.clamp(0.0, 1.0)) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_entries() {
        let mut data = vec![0.0; 12];
        data[5] = f64::NAN;
        assert!(LatentGrid::new(3, 2, 2, data).is_err());
        assert!(LatentGrid::new(3, 2, 2, vec![0.5; 12]).is_ok());
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(LatentGrid::new(0, 2, 2, vec![]).is_err());
        assert!(LatentGrid::new(3, 0, 2, vec![]).is_err());
    }

    #[test]
    fn clamp_unit_bounds_all_entries() {
        let g = LatentGrid::new(1, 2, 2, vec![-0.5, 0.25, 1.75, 1.0]).unwrap();
        let c = g.clamp_unit();
        assert_eq!(c.data(), &[0.0, 0.25, 1.0, 1.0]);
    }
}
