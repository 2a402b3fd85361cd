//! Dense activation grids and latent vectors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A C×H×W activation grid, stored channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<F>,
}

/// Latent vectors are plain dense vectors; no wrapper needed.
pub type LatentVector<F> = Vec<F>;

impl<F: Scalar> FeatureMap<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "feature map dims must be ≥ 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "feature map payload {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let len = self.height * self.width;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Narrow to f32, the on-disk precision.
    pub fn to_f32(&self) -> FeatureMap<f32> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    /// Widen from f32 storage (exact).
    pub fn from_f32(map: &FeatureMap<f32>) -> Self {
        Self {
            channels: map.channels,
            height: map.height,
            width: map.width,
            data: map
                .data
                .iter()
                .map(|v| F::from_f64_lossy(f64::from(*v)))
                .collect(),
        }
    }
}

/// An input image as synthesized or loaded from a dataset blob.
/// Layout matches the blob: row-major over H×W with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidShape(format!(
                "image payload {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> F {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Reorder into the channel-major layout the backbone consumes.
    pub fn to_feature_map(&self) -> FeatureMap<F> {
        let mut out = FeatureMap::zeros(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(c, y, x, self.at(y, x, c));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_channel_major() {
        let m = FeatureMap::from_vec(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(m.at(0, 0, 0), 0.0);
        assert_eq!(m.at(0, 1, 1), 3.0);
        assert_eq!(m.at(1, 0, 0), 4.0);
        assert_eq!(m.at(1, 1, 0), 6.0);
    }

    #[test]
    fn image_layout_is_channels_last() {
        let img = Image::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(img.at(0, 0, 0), 1.0);
        assert_eq!(img.at(0, 0, 1), 2.0);
        assert_eq!(img.at(0, 1, 0), 3.0);
        let map = img.to_feature_map();
        assert_eq!(map.at(0, 0, 1), 3.0);
        assert_eq!(map.at(1, 0, 1), 4.0);
    }

    #[test]
    fn shape_errors() {
        assert!(FeatureMap::<f64>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::<f64>::from_vec(0, 1, 1, vec![]).is_err());
    }
}
