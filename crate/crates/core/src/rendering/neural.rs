//! 2D neural renderer: upsamples a low-resolution feature image to RGB.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};
use crate::nn::spatial::{upsample_bilinear2x, upsample_nearest2x};
use crate::nn::{sigmoid, Conv2d, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralRendererConfig {
    pub feature_dim: usize,
    pub feature_resolution: usize,
    pub output_resolution: usize,
    /// Channel count never drops below this (or below the input width).
    pub min_channels: usize,
}

impl NeuralRendererConfig {
    /// Number of 2x upsampling stages, `log2(H / H_V)`.
    pub fn stages(&self) -> Result<usize> {
        let (h, hv) = (self.output_resolution, self.feature_resolution);
        if hv == 0 || h < hv || h % hv != 0 || !(h / hv).is_power_of_two() {
            bail_arg!("output resolution {h} must be a power-of-two multiple of the feature resolution {hv}");
        }
        Ok((h / hv).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.min_channels == 0 {
            bail_arg!("renderer channel counts must be positive");
        }
        self.stages().map(|_| ())
    }

    /// Channel widths `[c_0 = M_f, c_1, ..., c_K]`, halving to the floor.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut out = vec![self.feature_dim];
        for _ in 0..self.stages()? {
            let c = *out.last().expect("non-empty");
            out.push((c / 2).max(self.min_channels.min(c)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    conv0: Conv2d,
    conv1: Conv2d,
    skip: Option<Conv2d>,
}

impl UpStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = upsample_bilinear2x(x)?;
        let h = self.conv0.forward(&up.relu()?)?;
        let main = self.conv1.forward(&h.relu()?)?;
        let near = upsample_nearest2x(x)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(&near)?,
            None => near,
        };
        Ok((main + skip)?)
    }
}

/// Residual upsampling stages followed by a 1x1 projection to RGB in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct NeuralRenderer {
    pub config: NeuralRendererConfig,
    stages: Vec<UpStage>,
    to_rgb: Conv2d,
}

impl NeuralRenderer {
    pub fn new(pb: &mut ParamBuilder, name: &str, config: NeuralRendererConfig) -> Result<Self> {
        config.validate()?;
        let channels = config.channels()?;
        let mut stages = Vec::new();
        for (k, w) in channels.windows(2).enumerate() {
            let (cin, cout) = (w[0], w[1]);
            stages.push(UpStage {
                conv0: Conv2d::new(pb, &format!("{name}.stage{k}.conv0"), cin, cout, 3)?,
                conv1: Conv2d::new(pb, &format!("{name}.stage{k}.conv1"), cout, cout, 3)?,
                skip: if cin != cout {
                    Some(Conv2d::new(pb, &format!("{name}.stage{k}.skip"), cin, cout, 1)?)
                } else {
                    None
                },
            });
        }
        let last = *channels.last().expect("non-empty");
        let to_rgb = Conv2d::new(pb, &format!("{name}.to_rgb"), last, 3, 1)?;
        Ok(Self { config, stages, to_rgb })
    }

    /// `(B, H_V, W_V, M_f)` feature image to `(B, H, W, 3)` RGB.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = features.dims4()?;
        let hv = self.config.feature_resolution;
        if h != hv || w != hv || c != self.config.feature_dim {
            bail_arg!(
                "renderer expects ({hv}, {hv}, {}) feature images, got ({h}, {w}, {c})",
                self.config.feature_dim
            );
        }
        let mut x = features.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
        }
        Ok(sigmoid(&self.to_rgb.forward(&x.relu()?)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn renderer(hv: usize, h: usize, m_f: usize, floor: usize) -> (ParamStore, NeuralRenderer) {
        let mut store = ParamStore::new(DType::F64);
        let r = NeuralRenderer::new(
            &mut ParamBuilder::new(&mut store, 3),
            "render",
            NeuralRendererConfig {
                feature_dim: m_f,
                feature_resolution: hv,
                output_resolution: h,
                min_channels: floor,
            },
        )
        .unwrap();
        (store, r)
    }

    #[test]
    fn channel_schedule() {
        let cfg = NeuralRendererConfig {
            feature_dim: 128,
            feature_resolution: 16,
            output_resolution: 256,
            min_channels: 32,
        };
        assert_eq!(cfg.channels().unwrap(), vec![128, 64, 32, 32, 32]);
        let bad = NeuralRendererConfig { output_resolution: 48, ..cfg };
        assert!(bad.stages().is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let (_s, r) = renderer(4, 16, 8, 4);
        let x = Tensor::randn(0.0, 3.0, (2, 4, 4, 8), &Device::Cpu).unwrap();
        let y = r.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 16, 16, 3]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(r.forward(&Tensor::zeros((1, 8, 8, 8), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn zero_features_give_constant_interior() {
        let (_s, r) = renderer(8, 32, 8, 4);
        let y = r.forward(&Tensor::zeros((1, 8, 8, 8), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |i: usize, j: usize, c: usize| v[(i * 32 + j) * 3 + c];
        for c in 0..3 {
            let centre = at(16, 16, c);
            for i in 10..22 {
                for j in 10..22 {
                    assert!((at(i, j, c) - centre).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_resolution_is_pointwise() {
        let (_s, r) = renderer(4, 4, 6, 4);
        let x = Tensor::randn(0.0, 1.0, (1, 4, 4, 6), &Device::Cpu).unwrap();
        assert_eq!(r.forward(&x).unwrap().dims(), &[1, 4, 4, 3]);
    }
}
