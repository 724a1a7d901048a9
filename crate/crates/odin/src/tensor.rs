//! Dense row-major multi-dimensional arrays.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense array with row-major layout. `shape` extents are all positive and
/// `data.len() == shape.iter().product()`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorOf<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        TensorOf { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        TensorOf { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorOf { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(TensorOf { shape: self.shape.clone(), data })
    }

    /// Accumulate `other * factor` into self (same shape).
    pub fn axpy(&mut self, factor: S, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + factor * b;
        }
    }

    pub fn scale_in_place(&mut self, factor: S) {
        for a in self.data.iter_mut() {
            *a = *a * factor;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> S {
        self.squared_norm().sqrt()
    }

    pub fn max_value(&self) -> S {
        self.data.iter().copied().fold(S::neg_infinity(), S::max)
    }
}

/// Binary mask over an h x w grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w, "mask data length");
        Mask { h, w, data }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Mask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| !v)
    }

    /// Nearest-neighbor upsample to `(oh, ow)`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Mask {
        Mask::from_fn(oh, ow, |y, x| {
            let sy = (y * self.h) / oh;
            let sx = (x * self.w) / ow;
            self.get(sy, sx)
        })
    }
}

/// Segment labels over an h x w grid; values lie in `[0, K)` with K < 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), h * w, "label map data length");
        LabelMap { h, w, labels }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(f(y, x));
            }
        }
        LabelMap { h, w, labels }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of one label value.
    pub fn mask_of(&self, label: u8) -> Mask {
        Mask::new(self.h, self.w, self.labels.iter().map(|&l| l == label).collect())
    }

    /// One mask per label in `[0, k)`; empty labels yield empty masks.
    pub fn masks(&self, k: usize) -> Vec<Mask> {
        (0..k).map(|l| self.mask_of(l as u8)).collect()
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        LabelMap::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }

    /// Nearest-neighbor resample to `(oh, ow)` by cell-center lookup.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> LabelMap {
        LabelMap::from_fn(oh, ow, |y, x| {
            let sy = ((y as f64 + 0.5) * self.h as f64 / oh as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.w as f64 / ow as f64) as usize;
            self.get(sy.min(self.h - 1), sx.min(self.w - 1))
        })
    }
}

/// Stable log-sum-exp of a slice, computed with max subtraction.
pub fn logsumexp<S: Scalar>(values: &[S]) -> S {
    assert!(!values.is_empty(), "logsumexp of empty slice");
    let m = values.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    let sum: S = values.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape() {
        assert!(TensorOf::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorOf::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorOf::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn logsumexp_of_two_zeros_is_ln_two() {
        let v = logsumexp(&[0.0f64, 0.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_is_shift_invariant_and_stable() {
        let a = logsumexp(&[1000.0f64, 1000.0]);
        assert!((a - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn works_in_single_precision() {
        let t = TensorOf::<f32>::from_vec(vec![3.0, 4.0]);
        assert!((t.norm() - 5.0).abs() < 1e-6);
    }
}
