//! Dense row-major tensor of `f64` values.

/// A dense real tensor: a shape vector and a row-major data buffer.
///
/// Scalars are represented as shape `[1]`. The element count always equals
/// the product of the shape entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from an explicit shape and row-major data.
    ///
    /// Panics if the data length does not match the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// One-dimensional tensor copied from a slice.
    pub fn from_slice(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Shape vector.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for a single-element tensor.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row-major data buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major data buffer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor and returns its data buffer.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor is not a scalar.
    pub fn scalar_value(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "expected scalar tensor, got shape {:?}",
            self.shape
        );
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_checked() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn bad_length_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(4.5);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value(), 4.5);
    }
}
