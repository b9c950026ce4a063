//! Image batches: dense `(batch, channels, height, width)` tensors tagged
//! with the value-range convention they follow.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array4;

/// Declared value range of an [`ImageBatch`].
///
/// The tag records the convention the data follows *after clipping*; ops that
/// intentionally leave the range (e.g. adding diffusion noise) keep the tag of
/// the convention they operate in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// Values nominally in `[0, 1]`.
    Unit,
    /// Values nominally in `[-1, 1]`.
    Signed,
}

impl RangeTag {
    pub fn name(self) -> &'static str {
        match self {
            RangeTag::Unit => "unit",
            RangeTag::Signed => "signed",
        }
    }

    /// Inclusive bounds of the convention.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

impl std::fmt::Display for RangeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A batch of images stored as `(batch, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    data: Array4<T>,
    range: RangeTag,
}

impl<T: Scalar> ImageBatch<T> {
    /// Wraps a tensor, rejecting empty axes and non-finite entries.
    pub fn new(data: Array4<T>, range: RangeTag) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "image batch axes must be nonzero, got {:?}",
                data.shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "image batch construction".into(),
            });
        }
        Ok(Self { data, range })
    }

    /// Zero-filled batch (useful as a perturbation or accumulator seed).
    pub fn zeros(shape: (usize, usize, usize, usize), range: RangeTag) -> Self {
        Self {
            data: Array4::zeros(shape),
            range,
        }
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<T> {
        self.data
    }

    pub fn range_tag(&self) -> RangeTag {
        self.range
    }

    /// `(batch, channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2, d.3)
    }

    pub fn batch_len(&self) -> usize {
        self.data.dim().0
    }

    /// Errors unless the batch carries `expected`.
    pub fn require_range(&self, expected: RangeTag) -> Result<()> {
        if self.range == expected {
            Ok(())
        } else {
            Err(Error::RangeTagMismatch {
                expected: expected.name(),
                actual: self.range.name(),
            })
        }
    }

    /// Same data, different declared convention (used by explicit rescales).
    pub fn with_range(self, range: RangeTag) -> Self {
        Self {
            data: self.data,
            range,
        }
    }

    /// Clips every entry into the tag's inclusive bounds.
    pub fn clip_to_range(mut self) -> Self {
        let (lo, hi) = self.range.bounds();
        let (lo, hi) = (T::from_f64_c(lo), T::from_f64_c(hi));
        self.data.mapv_inplace(|v| v.min(hi).max(lo));
        self
    }

    /// `[0,1]` -> `[-1,1]` rescale.
    pub fn unit_to_signed(&self) -> Result<Self> {
        self.require_range(RangeTag::Unit)?;
        let two = T::from_f64_c(2.0);
        let one = T::one();
        Ok(Self {
            data: self.data.mapv(|v| two * v - one),
            range: RangeTag::Signed,
        })
    }

    /// `[-1,1]` -> `[0,1]` rescale.
    pub fn signed_to_unit(&self) -> Result<Self> {
        self.require_range(RangeTag::Signed)?;
        let half = T::from_f64_c(0.5);
        let one = T::one();
        Ok(Self {
            data: self.data.mapv(|v| half * (v + one)),
            range: RangeTag::Unit,
        })
    }

    /// Maximum absolute difference against another batch of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::shape(self.data.shape(), other.data.shape()));
        }
        let mut m = T::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            m = m.max((*a - *b).abs());
        }
        Ok(m)
    }
}
