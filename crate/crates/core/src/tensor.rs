//! Dense row-major `f64` tensors.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Named tensors in declaration order (parameters, gradients).
pub type TensorMap = IndexMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A batch-major matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows have unequal lengths"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading dimension, treated as the batch/sample axis.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Per-sample shape (everything after the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        self.shape.get(1..).unwrap_or(&[])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let stride: usize = self.sample_shape().iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers samples by index along the leading axis.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let stride: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::from_parts(shape, data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_assign(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }
}

/// One-hot encodes labels into a `[n, num_classes]` tensor.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + l] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), num_classes], data))
}

/// Flattens a map of tensors into one vector in declaration order.
pub fn flatten_map(map: &TensorMap) -> Vec<f64> {
    map.values().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn total_len(map: &TensorMap) -> usize {
    map.values().map(Tensor::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.gather(&[2, 0]).data(), &[5., 6., 1., 2.]);
        assert_eq!(t.slice_batch(1, 2).shape(), &[1, 2]);
        assert_eq!(t.slice_batch(1, 2).data(), &[3., 4.]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(one_hot(&[0, 2], 2).is_err());
        assert_eq!(one_hot(&[1], 3).unwrap().data(), &[0., 1., 0.]);
    }
}
