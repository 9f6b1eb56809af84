//! Value types shared across the pipeline: feature maps and masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Real-valued `h×w×C` map, stored channel-major. Always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(
                "FeatureMap::new",
                "non-empty dims",
                format!("{channels}x{height}x{width}"),
            ));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape(
                "FeatureMap::new",
                channels * height * width,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            tensor: Tensor::from_vec(&[channels, height, width], values),
        })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.chw();
        FeatureMap::new(c, h, w, tensor.into_data())
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            tensor: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.tensor.channel(c)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// The `C`-vector at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels()).map(|c| self.get(c, y, x)).collect()
    }

    pub fn scaled(&self, factor: f32) -> FeatureMap {
        FeatureMap {
            tensor: self.tensor.map(|v| v * factor),
        }
    }
}

/// Per-pixel inharmonious probability, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl MaskMap {
    /// Rejects values outside `[0, 1]` (including NaN).
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_dims(height, width, values.len())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(MaskMap {
            height,
            width,
            values,
        })
    }

    /// Clamps into `[0, 1]`; NaN is still rejected.
    pub fn from_clamped(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::check_dims(height, width, values.len())?;
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("mask contains NaN".into()));
        }
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(MaskMap {
            height,
            width,
            values,
        })
    }

    fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
        if height == 0 || width == 0 || len != height * width {
            return Err(Error::shape(
                "MaskMap::new",
                format!("{height}x{width} non-empty"),
                len,
            ));
        }
        Ok(())
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        MaskMap::new(height, width, vec![value; height * width]).expect("constant mask in range")
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskMap::constant(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn same_shape(&self, other: &MaskMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone())
    }

    /// `true` where the value reaches `threshold`.
    pub fn threshold(&self, threshold: f32) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    /// Fraction of pixels at or above 0.5.
    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v >= 0.5).count() as f64 / self.values.len() as f64
    }
}
