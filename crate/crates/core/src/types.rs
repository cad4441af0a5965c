//! Raster types shared by every stage: images, probability maps, and masks.
//!
//! An [`Image`] is a `[C][H][W]` stack of intensities in `[0,1]`. A
//! [`ProbabilityMap`] is a `[L][H][W]` stack of per-pixel class
//! probabilities that sum to one at every pixel. A [`BinaryMask`] holds
//! `{0,1}` values and a [`ContinuousMask`] holds `[0,1]` values; a
//! continuous mask's native size may differ from the image it is later
//! applied to.

use ndarray::{Array2, Array3};

use crate::error::{MisureError, Result};

/// Tolerance for the per-pixel sum-to-one check on probability maps.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// A `[C][H][W]` image with intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c < 1 || h < 1 || w < 1 {
            return Err(MisureError::Shape(format!(
                "image dims must be positive, got {}x{}x{}",
                c, h, w
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(MisureError::Numerical(format!(
                    "image value {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Constructs without the range scan. Finite-difference probes
    /// step slightly outside `[0,1]`, so only finiteness is asserted.
    pub(crate) fn new_unchecked(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// A `[L][H][W]` stack of per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    data: Array3<f64>,
}

impl ProbabilityMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (l, h, w) = data.dim();
        if l < 1 || h < 1 || w < 1 {
            return Err(MisureError::Shape(format!(
                "probability map dims must be positive, got {}x{}x{}",
                l, h, w
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for k in 0..l {
                    let v = data[[k, y, x]];
                    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                        return Err(MisureError::Numerical(format!(
                            "probability {v} outside [0,1] at ({y},{x})"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(MisureError::Numerical(format!(
                        "per-pixel probabilities sum to {sum} at ({y},{x})"
                    )));
                }
            }
        }
        Ok(Self { data })
    }

    /// Constructs without the simplex scan (softmax outputs satisfy it).
    pub(crate) fn new_unchecked(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// A `[H][W]` mask with values in `{0,1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(MisureError::Numerical(
                "binary mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: Array2::ones((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| u8::from(f(y, x))),
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<u8> {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.dim() == other.data.dim()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a == 0 || b == 1)
    }

    /// Converts to a continuous mask with the same 0/1 values.
    pub fn to_continuous(&self) -> ContinuousMask {
        ContinuousMask::new_unchecked(self.data.mapv(f64::from))
    }
}

/// A `[h][w]` mask with values in `[0,1]`; its native size may differ
/// from the image it is resized onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousMask {
    data: Array2<f64>,
}

impl ContinuousMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(MisureError::Numerical(format!(
                    "mask value {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { data })
    }

    pub(crate) fn new_unchecked(data: Array2<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self { data }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: Array2::ones((height, width)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Number of strictly positive entries.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// The support as a binary mask (1 where the value is strictly positive).
    pub fn support(&self) -> BinaryMask {
        BinaryMask::new_unchecked_from(self.data.mapv(|v| u8::from(v > 0.0)))
    }
}

impl BinaryMask {
    pub(crate) fn new_unchecked_from(data: Array2<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { data }
    }
}
