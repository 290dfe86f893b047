//! The image currency: `[B, 3, H, W]` tensors with values in `[-1, 1]`.

pub use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    /// Validate channel count, spatial divisibility, range and finiteness.
    pub fn new(t: Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "image batch must be [B>=1, 3, H, W], got {:?}",
                t.shape()
            )));
        }
        if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be >= 16 and divisible by 4"
            )));
        }
        if let Some(v) = t.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Numeric(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        Self::new(rgb_to_tensor(img))
    }

    pub fn stack(parts: &[ImageBatch]) -> Result<Self> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
        Ok(Self(Tensor::cat_batch(&ts)?))
    }

    pub fn item(&self, i: usize) -> ImageBatch {
        Self(self.0.batch_item(i))
    }
}

/// A named per-layer feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub layer_id: usize,
    pub data: Tensor,
}

/// 8-bit RGB to a `[1, 3, H, W]` tensor, mapping `0..=255` linearly onto `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("sizes match")
}

/// Sample `i` of a `[B, 3, H, W]` tensor to 8-bit RGB, clamping to `[-1, 1]`.
pub fn tensor_to_rgb(t: &Tensor, i: usize) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = &t.data()[i * 3 * h * w..(i + 1) * 3 * h * w];
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize].clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}
