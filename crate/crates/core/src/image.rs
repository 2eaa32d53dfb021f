//! Pixel-space images with channel values in `[0, 1]`.

use std::path::Path;

use invguard_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `(height, width, channels)`.
pub type ImageShape = (usize, usize, usize);

/// An `H x W x C` image. Values are stored channel-planar (`C, H, W`), the
/// layout the convolutional models consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        let (h, w, c) = shape;
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{h}x{w}x{c} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn filled(shape: ImageShape, value: f64) -> Self {
        let (h, w, c) = shape;
        Self {
            height: h,
            width: w,
            channels: c,
            data: vec![value; h * w * c],
        }
    }

    pub fn shape(&self) -> ImageShape {
        (self.height, self.width, self.channels)
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

    /// Channel-planar values.
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

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "image {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn clip_unit(&self) -> Self {
        self.map(clip_unit)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `max |self - other|`.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks images into an `[N, C, H, W]` batch.
    pub fn to_batch(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            first.ensure_same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
    }

    pub fn from_batch(batch: &Tensor, shape: ImageShape) -> Result<Vec<ImageTensor>> {
        let (h, w, c) = shape;
        if batch.item_len() != h * w * c {
            return Err(Error::Shape(format!(
                "batch items of {} values are not {h}x{w}x{c} images",
                batch.item_len()
            )));
        }
        (0..batch.batch())
            .map(|i| ImageTensor::new(shape, batch.item(i).to_vec()))
            .collect()
    }

    /// 8-bit quantization, the representation written to PNG.
    pub fn quantized(&self) -> Self {
        self.map(|v| (clip_unit(v) * 255.0).round() / 255.0)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
                    out.push((clip_unit(self.get(y, x, src)) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if self.channels == 1 {
            let buf: Vec<u8> = self.data.iter().map(|&v| (clip_unit(v) * 255.0).round() as u8).collect();
            image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ColorType::L8)?;
        } else {
            image::save_buffer(
                path,
                &self.to_rgb8(),
                self.width as u32,
                self.height as u32,
                image::ColorType::Rgb8,
            )?;
        }
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw()))
    }

    pub fn from_rgb8(height: usize, width: usize, raw: &[u8]) -> Self {
        let mut out = Self::filled((height, width, 3), 0.0);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    out.set(y, x, c, raw[(y * width + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        out
    }
}

pub fn clip_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new((2, 2, 3), vec![0.0; 11]).is_err());
        assert!(ImageTensor::new((0, 2, 3), vec![]).is_err());
    }

    #[test]
    fn batch_round_trip() {
        let a = ImageTensor::filled((2, 3, 3), 0.25);
        let b = ImageTensor::filled((2, 3, 3), 0.75);
        let t = ImageTensor::to_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        assert_eq!(ImageTensor::from_batch(&t, (2, 3, 3)).unwrap(), vec![a, b]);
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..48).map(|i| i as f64 / 47.0).collect();
        let img = ImageTensor::new((4, 4, 3), data).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load_png(&path).unwrap(), img.quantized());
    }
}
