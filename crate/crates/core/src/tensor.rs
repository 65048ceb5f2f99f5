//! Dense row-major tensors of `f64` values.
//!
//! `Tensor` is the carrier for activations, parameters, gradients, and
//! perturbations. Constructors enforce the two invariants every consumer
//! relies on: the element count matches the shape product, and all values
//! are finite.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Unvalidated mirror used so deserialization re-checks the invariants.
#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, count mismatches, and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} implies {} values, got {}", shape, expected, values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor with shape {shape:?}")));
        }
        Ok(Self { shape, values })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// 1-D tensor from a value list.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The sole value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of {} elements",
                self.values.len()
            )));
        }
        Ok(self.values[0])
    }

    /// Reinterprets the value buffer under a new shape of equal size.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.values.clone())
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), values)
    }

    /// Elementwise sum `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), values)
    }

    /// `factor * self`.
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|v| v * factor).collect())
    }

    /// Extracts row `index` of a rank-≥1 tensor, dropping the leading axis.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::InvalidArgument("row() on rank-0 tensor".into()));
        }
        let rows = self.shape[0];
        if index >= rows {
            return Err(Error::InvalidArgument(format!("row {index} out of {rows}")));
        }
        let row_len = self.values.len() / rows;
        let values = self.values[index * row_len..(index + 1) * row_len].to_vec();
        Tensor::new(self.shape[1..].to_vec(), values)
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(rows: &[Tensor]) -> Result<Tensor> {
        let first = rows.first().ok_or_else(|| {
            Error::InvalidArgument("stack() of zero tensors".into())
        })?;
        let mut values = Vec::with_capacity(rows.len() * first.len());
        for r in rows {
            if r.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", r.shape(), first.shape()),
                });
            }
            values.extend_from_slice(r.values());
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, values)
    }
}

/// Row-wise softmax with max-subtraction, written into `out`.
///
/// `values` is treated as `rows` contiguous slices of length `width`.
/// Shared by the tape primitive and temperature-scaled probability
/// evaluation so both paths agree bitwise.
pub(crate) fn softmax_rows(values: &[f64], width: usize, out: &mut [f64]) {
    debug_assert_eq!(values.len() % width, 0);
    debug_assert_eq!(values.len(), out.len());
    for (row, out_row) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// Row-wise log-softmax: `z - max - ln(sum exp(z - max))`.
pub(crate) fn log_softmax_rows(values: &[f64], width: usize, out: &mut [f64]) {
    debug_assert_eq!(values.len() % width, 0);
    debug_assert_eq!(values.len(), out.len());
    for (row, out_row) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - max - log_sum;
        }
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_value_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_value() {
        let s = Tensor::scalar(4.5).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 4.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut out = [0.0; 2];
        softmax_rows(&[0.0, 0.0], 2, &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
    }

    #[test]
    fn deserialization_revalidates() {
        let bad = r#"{"shape":[2],"values":[1.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
        let good = r#"{"shape":[2],"values":[1.0,2.0]}"#;
        let t: Tensor = serde_json::from_str(good).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0]);
    }
}
