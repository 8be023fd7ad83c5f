//! RGB image tensors in `[0, 1]`, stored channel-planar so they drop straight
//! into the network's NCHW layout.

use crate::tensor::{Scalar, Tensor};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid image dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },
}

/// `width` (M) × `height` (N) × 3 channels, values clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height * Self::CHANNELS {
            return Err(ImageError::Dimensions { width, height });
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self::new(width, height, data).expect("valid dims")
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, data).expect("valid dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |x, y, c| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(x as usize, y as usize, c) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Encode {
                path: path.display().to_string(),
                source,
            })
    }

    /// Quantises through 8 bits, matching what a PNG round trip would store.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v * 255.0).round() / 255.0)
                .collect(),
        }
    }

    /// `[1, 3, height, width]` network input.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn batch<T: Scalar>(images: &[&ImageTensor]) -> Tensor<T> {
        let items: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::stack(&items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped() {
        let img = ImageTensor::new(1, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(ImageTensor::new(0, 4, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn png_round_trip_is_quantised_identity() {
        let img = ImageTensor::from_fn(5, 4, |x, y, c| ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}
