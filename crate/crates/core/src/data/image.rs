use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
/// Defaults are the ImageNet statistics used by torchvision backbones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// A normalized RGB image in channel-major (`[3, H, W]`) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    /// Mirrors the image left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }
}

/// Decodes an image file, resizes it bilinearly to `height × width` and
/// normalizes it.
pub fn load_image(
    path: &Path,
    (height, width): (usize, usize),
    norm: &Normalization,
) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img
        .resize_exact(width as u32, height as u32, FilterType::Triangle)
        .to_rgb8();
    let plane = height * width;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    ImageTensor::new(height, width, data)
}

/// Training-time augmentation: a left-right mirror with probability
/// `flip_prob`, nothing else.
pub fn augment_train<R: Rng + ?Sized>(image: ImageTensor, flip_prob: f64, rng: &mut R) -> ImageTensor {
    if flip_prob > 0.0 && rng.random_bool(flip_prob.min(1.0)) {
        image.flip_horizontal()
    } else {
        image
    }
}

/// Stacks equally-sized images into an `[N, 3, H, W]` tensor.
pub fn stack_images(images: &[ImageTensor], device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Input("cannot stack an empty image list".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "mixed image sizes {h}x{w} and {}x{}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}
