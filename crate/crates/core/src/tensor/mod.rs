//! Dense f64 tensors, named parameter sets and a reverse-mode tape.

mod optim;
mod tape;

pub use optim::{finite_diff_grad, sgd_step};
pub use tape::{Gradients, Tape, Var};

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a shape with a zero dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
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

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self
            .shape
            .last()
            .expect("tensor has at least one dimension")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = self.shape[0];
        if start >= end || end > outer {
            return Err(Error::InvalidShape(format!(
                "slice [{start}, {end}) out of range for leading dimension {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * inner..end * inner].to_vec())
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    tape::softmax_in_place(&mut out);
    out
}

/// `−log softmax(logits)[label]` for a single logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(tape::neg_log_softmax(logits.data(), label))
}

/// A parameter tensor together with its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameters in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.params.insert(name, Param { value, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
    }

    /// Subset holding only the named parameters, in this set's order.
    pub fn select<F: Fn(&str) -> bool>(&self, keep: F) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(name, _)| keep(name))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Appends every parameter of `other`, rejecting name collisions.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, param) in other.params {
            self.insert(name, param.value, param.frozen)?;
        }
        Ok(())
    }

    /// Bitwise equality of names, order, values and freeze flags.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| {
                    na == nb && a.frozen == b.frozen && a.value.bits_eq(&b.value)
                })
    }

    /// All parameter values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in self.params.values() {
            out.extend_from_slice(p.value.data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        assert!((softmax_cross_entropy(&uniform, 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let confident = Tensor::from_vec(vec![1000.0, 0.0]).unwrap();
        let l = softmax_cross_entropy(&confident, 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        // -log(e^3 / (e + e^2 + e^3)) evaluated with mpmath at 50 digits
        let three = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(
            (softmax_cross_entropy(&three, 2).unwrap() - 0.407_605_964_444_380_1).abs() < 1e-12
        );
        assert!(matches!(
            softmax_cross_entropy(&three, 3),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::scalar(1.0), false).unwrap();
        assert!(matches!(
            set.insert("w", Tensor::scalar(2.0), false),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(-0.0);
        assert_eq!(a, b);
        assert!(!a.bits_eq(&b));
    }

    #[test]
    fn slice_outer_rows() {
        let t = Tensor::new(vec![3, 2], (0..6).map(f64::from).collect()).unwrap();
        let s = t.slice_outer(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.slice_outer(2, 2).is_err());
    }
}
