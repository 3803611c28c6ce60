//! Cameras, rays, volume rendering, the neural renderer and the generator.

pub mod camera;
pub mod generator;
pub mod neural;
pub mod volume;

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{bail_arg, Error, Result};

pub use camera::{generate_rays, sample_camera, stratified_depths, CameraPose, CameraRanges, Interval};
pub use generator::{Generator, GeneratorConfig, ObjectPrior, SampledScene};
pub use neural::{NeuralRenderer, NeuralRendererConfig};
pub use volume::{render_weights, volume_render, volume_render_tensor, weights_tensor, RaySample};

/// RGB image with channels in `[0, 1]`, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RenderedImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            bail_arg!("image buffer has {} values, expected {}", data.len(), height * width * 3);
        }
        Ok(Self { height, width, data })
    }

    /// Splits a `(B, H, W, 3)` tensor into images.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (b, h, w, c) = t.dims4()?;
        if c != 3 {
            bail_arg!("expected 3 channels, got {c}");
        }
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let n = h * w * 3;
        Ok((0..b)
            .map(|i| Self {
                height: h,
                width: w,
                data: flat[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    /// Stacks images into a `(B, H, W, 3)` tensor.
    pub fn stack(images: &[Self], dtype: DType) -> Result<Tensor> {
        let Some(first) = images.first() else {
            bail_arg!("cannot stack zero images");
        };
        if images.iter().any(|im| im.height != first.height || im.width != first.width) {
            bail_arg!("images in a batch must share a size");
        }
        let data: Vec<f64> = images.iter().flat_map(|im| im.data.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (images.len(), first.height, first.width, 3), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size checked")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }
}
