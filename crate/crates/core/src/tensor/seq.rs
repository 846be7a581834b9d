use super::{Real, ValidityMask};
use crate::{Error, Result};

/// A `channels × length` grid stored channel-major, with an optional
/// gradient slot of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTensor<R = f32> {
    channels: usize,
    length: usize,
    values: Vec<R>,
    grad: Option<Vec<R>>,
}

impl<R: Real> SeqTensor<R> {
    pub fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            values: vec![R::zero(); channels * length],
            grad: None,
        }
    }

    pub fn from_vec(channels: usize, length: usize, values: Vec<R>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {channels}x{length}"
            )));
        }
        if values.len() != channels * length {
            return Err(Error::Shape(format!(
                "{} values do not fill a {channels}x{length} grid",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            values,
            grad: None,
        })
    }

    /// Builds a tensor from per-channel rows.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let channels = rows.len();
        let length = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != length) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(channels, length, rows.concat())
    }

    pub fn from_fn(channels: usize, length: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut values = Vec::with_capacity(channels * length);
        for c in 0..channels {
            for t in 0..length {
                values.push(f(c, t));
            }
        }
        Self {
            channels,
            length,
            values,
            grad: None,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.length)
    }

    #[inline]
    pub fn values(&self) -> &[R] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<R> {
        self.values
    }

    #[inline]
    pub fn get(&self, channel: usize, t: usize) -> R {
        self.values[channel * self.length + t]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, t: usize, v: R) {
        self.values[channel * self.length + t] = v;
    }

    pub fn row(&self, channel: usize) -> &[R] {
        &self.values[channel * self.length..(channel + 1) * self.length]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [R] {
        &mut self.values[channel * self.length..(channel + 1) * self.length]
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<R>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient of {} entries for a {}x{} tensor",
                grad.len(),
                self.channels,
                self.length
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Zeroes every column the mask marks invalid.
    pub fn zero_invalid(&mut self, mask: &ValidityMask) {
        let valid = mask.valid_len().min(self.length);
        for c in 0..self.channels {
            for v in &mut self.row_mut(c)[valid..] {
                *v = R::zero();
            }
        }
    }

    /// Returns the sub-grid of columns `[start, start + len)`.
    pub fn slice_time(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.channels, len, |c, t| self.get(c, start + t))
    }

    pub fn cast<S: Real>(&self) -> SeqTensor<S> {
        SeqTensor {
            channels: self.channels,
            length: self.length,
            values: self.values.iter().map(|v| S::of(v.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| S::of(v.f64())).collect()),
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}
