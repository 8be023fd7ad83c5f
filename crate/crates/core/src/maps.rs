//! Single-channel per-pixel maps (pMOS, ROI logits, ROI weights).

use crate::tensor::{Scalar, Tensor};

/// Row-major `height × width` map. `width` is M, `height` is N.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

/// Per-pixel predicted MOS.
pub type PmosMap<T> = ScalarMap<T>;
/// Unnormalised ROI predictions.
pub type RoiLogits<T> = ScalarMap<T>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("map dims {actual:?} do not match {expected:?} (width, height)")]
pub struct DimMismatch {
    pub expected: (usize, usize),
    pub actual: (usize, usize),
}

impl<T: Scalar> ScalarMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Self {
        assert_eq!(width * height, values.len(), "map length does not match dims");
        Self {
            width,
            height,
            values,
        }
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    /// Extracts one `(sample, channel)` plane of a batch tensor.
    pub fn from_plane(t: &Tensor<T>, n: usize, c: usize) -> Self {
        Self::new(t.width(), t.height(), t.plane(n, c).to_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Spatial mean p̄.
    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn check_same_dims(&self, other: &ScalarMap<T>) -> Result<(), DimMismatch> {
        if self.dims() != other.dims() {
            return Err(DimMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Self {
        assert!(width <= self.width && height <= self.height);
        Self::from_fn(width, height, |x, y| self.get(x, y))
    }

    pub fn min_max(&self) -> (T, T) {
        self.values.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn to_f64(&self) -> ScalarMap<f64> {
        ScalarMap::new(
            self.width,
            self.height,
            self.values.iter().map(|v| v.to_f64().unwrap()).collect(),
        )
    }
}
