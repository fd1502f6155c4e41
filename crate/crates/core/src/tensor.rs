//! Dense row-major f32 tensors, 1 to 4 dimensions.

use crate::error::{Error, Result};

/// N-dimensional dense array of 32-bit floats. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidTensor(format!(
            "shape must have 1-4 dimensions, got {:?}",
            shape
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidTensor(format!(
            "shape extents must be positive, got {:?}",
            shape
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidTensor(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a shape-[1] tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if self.shape != [1] {
            return Err(Error::shape("scalar_value", &[1], &self.shape));
        }
        Ok(self.data[0])
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// In-place `self += scale * other`.
    pub fn scaled_add(&mut self, scale: f32, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("scaled_add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn data_length_matches_shape_product() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn argmax_first_on_ties() {
        let t = Tensor::new(vec![4], vec![0.5, 0.5, 0.1, 0.5]).unwrap();
        assert_eq!(t.argmax(), 0);
    }

    #[test]
    fn scalar_roundtrip() {
        assert_eq!(Tensor::scalar(2.5).scalar_value().unwrap(), 2.5);
        assert!(Tensor::zeros(&[2]).scalar_value().is_err());
    }
}
