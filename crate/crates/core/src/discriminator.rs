//! Conditional projection discriminator and its differentiable input gradient.
//!
//! `logit(x, c) = psi(phi(x)) + <e(c), phi(x)>`, where `phi` is a residual
//! convolutional feature extractor ending in spatial mean pooling.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};
use crate::nn::spatial::{avg_pool2x, avg_pool2x_adjoint};
use crate::nn::{positive_mask, Conv2d, Linear, ParamBuilder, ParamStore};

/// Anything that maps `(B, H, W, 3)` images and `(B, M_c)` conditions to `(B)`
/// logits, and can express the input gradient of those logits as a
/// differentiable graph (needed for the gradient penalty).
pub trait Critic {
    fn logits(&self, images: &Tensor, conditions: &Tensor) -> Result<Tensor>;

    /// `d logit_b / d images_b`, same shape as `images`, differentiable w.r.t.
    /// the critic's parameters.
    fn input_gradient(&self, images: &Tensor, conditions: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub condition_dim: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl DiscriminatorConfig {
    /// Number of downsampling blocks, `log2(H / 4)` (0 below 8x8 inputs).
    pub fn blocks(&self) -> Result<usize> {
        let h = self.resolution;
        if h < 4 || !h.is_power_of_two() {
            bail_arg!("discriminator resolution must be a power of two >= 4, got {h}");
        }
        Ok((h / 4).trailing_zeros() as usize)
    }

    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut out = vec![self.base_channels];
        for _ in 0..self.blocks()? {
            let c = *out.last().expect("non-empty");
            out.push((2 * c).min(self.max_channels.max(c)));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.condition_dim == 0 || self.base_channels == 0 || self.max_channels == 0 {
            bail_arg!("discriminator dims must be positive");
        }
        self.blocks().map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv0: Conv2d,
    conv1: Conv2d,
    skip: Option<Conv2d>,
}

/// Intermediate activations kept for the explicit backward pass.
struct BlockTrace {
    pooled: Tensor,
    pre1: Tensor,
}

impl DownBlock {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockTrace)> {
        let pooled = avg_pool2x(x)?;
        let pre1 = self.conv0.forward(&pooled.relu()?)?;
        let main = self.conv1.forward(&pre1.relu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(&pooled)?,
            None => pooled.clone(),
        };
        Ok(((main + skip)?, BlockTrace { pooled, pre1 }))
    }

    /// Cotangent w.r.t. the block input given the cotangent `g` of its output.
    fn backward(&self, trace: &BlockTrace, g: &Tensor) -> Result<Tensor> {
        let g_main = self.conv1.transpose(g)?;
        let g_pre1 = (g_main * positive_mask(&trace.pre1)?)?;
        let g_relu0 = self.conv0.transpose(&g_pre1)?;
        let g_pool_main = (g_relu0 * positive_mask(&trace.pooled)?)?;
        let g_pool_skip = match &self.skip {
            Some(conv) => conv.transpose(g)?,
            None => g.clone(),
        };
        Ok(avg_pool2x_adjoint(&(g_pool_main + g_pool_skip)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    stem: Conv2d,
    blocks: Vec<DownBlock>,
    head: Linear,
    embed: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut pb = ParamBuilder::new(&mut params, seed);
        let channels = config.channels()?;
        let stem = Conv2d::new(&mut pb, "disc.stem", 3, channels[0], 3)?;
        let mut blocks = Vec::new();
        for (k, w) in channels.windows(2).enumerate() {
            let (cin, cout) = (w[0], w[1]);
            blocks.push(DownBlock {
                conv0: Conv2d::new(&mut pb, &format!("disc.block{k}.conv0"), cin, cout, 3)?,
                conv1: Conv2d::new(&mut pb, &format!("disc.block{k}.conv1"), cout, cout, 3)?,
                skip: if cin != cout {
                    Some(Conv2d::no_bias(&mut pb, &format!("disc.block{k}.skip"), cin, cout, 1)?)
                } else {
                    None
                },
            });
        }
        let last = *channels.last().expect("non-empty");
        let head = Linear::new(&mut pb, "disc.head", last, 1)?;
        let embed = Linear::new(&mut pb, "disc.embed", config.condition_dim, last)?;
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            head,
            embed,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn check(&self, images: &Tensor, conditions: &Tensor) -> Result<usize> {
        let (b, h, w, c) = images.dims4()?;
        let r = self.config.resolution;
        if (h, w, c) != (r, r, 3) {
            bail_arg!("discriminator expects ({r}, {r}, 3) images, got ({h}, {w}, {c})");
        }
        if conditions.dims2()? != (b, self.config.condition_dim) {
            bail_arg!(
                "conditions {:?} do not match batch {b} x {}",
                conditions.dims(),
                self.config.condition_dim
            );
        }
        Ok(b)
    }

    fn features(&self, images: &Tensor) -> Result<(Tensor, Vec<BlockTrace>, Tensor)> {
        let mut h = self.stem.forward(images)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward(&h)?;
            traces.push(trace);
            h = out;
        }
        let phi = h.relu()?.mean(1)?.mean(1)?;
        Ok((phi, traces, h))
    }

    /// Cotangent of `sum_b logit_b` w.r.t. the pooled features.
    fn phi_cotangent(&self, conditions: &Tensor, batch: usize) -> Result<Tensor> {
        let w = self.head.weight.as_tensor().t()?; // (1, C)
        Ok(self.embed.forward(conditions)?.broadcast_add(&w)?.reshape((batch, ()))?)
    }
}

impl Critic for Discriminator {
    fn logits(&self, images: &Tensor, conditions: &Tensor) -> Result<Tensor> {
        self.check(images, conditions)?;
        let (phi, _, _) = self.features(images)?;
        let unconditional = self.head.forward(&phi)?.squeeze(1)?;
        let projection = (self.embed.forward(conditions)? * &phi)?.sum(D::Minus1)?;
        Ok((unconditional + projection)?)
    }

    fn input_gradient(&self, images: &Tensor, conditions: &Tensor) -> Result<Tensor> {
        let b = self.check(images, conditions)?;
        let (_, traces, last) = self.features(images)?;
        let (_, h, w, _) = last.dims4()?;
        let g_phi = (self.phi_cotangent(conditions, b)? / (h * w) as f64)?;
        let mut g = last.ones_like()?.broadcast_mul(&g_phi.unsqueeze(1)?.unsqueeze(1)?)?;
        g = (g * positive_mask(&last)?)?;
        for (block, trace) in self.blocks.iter().zip(&traces).rev() {
            g = block.backward(trace, &g)?;
        }
        self.stem.transpose(&g)
    }
}

/// `D(x) = <w, x> + <u, c> + b`: a critic with an analytic input gradient.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    pub weight: Tensor,
    pub condition_weight: Tensor,
    pub bias: f64,
}

impl LinearCritic {
    pub fn new(weight: Tensor, condition_weight: Tensor, bias: f64) -> Self {
        Self {
            weight,
            condition_weight,
            bias,
        }
    }
}

impl Critic for LinearCritic {
    fn logits(&self, images: &Tensor, conditions: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let x = images.reshape((b, ()))?;
        let w = self.weight.reshape((1, ()))?;
        let from_image = x.broadcast_mul(&w)?.sum(1)?;
        let from_cond = conditions.broadcast_mul(&self.condition_weight.reshape((1, ()))?)?.sum(1)?;
        Ok(((from_image + from_cond)? + self.bias)?)
    }

    fn input_gradient(&self, images: &Tensor, _conditions: &Tensor) -> Result<Tensor> {
        Ok(self.weight.unsqueeze(0)?.broadcast_as(images.shape())?.contiguous()?)
    }
}

/// Critic that ignores its input entirely.
#[derive(Debug, Clone, Copy)]
pub struct ConstantCritic(pub f64);

impl Critic for ConstantCritic {
    fn logits(&self, images: &Tensor, _conditions: &Tensor) -> Result<Tensor> {
        Ok((Tensor::ones(images.dim(0)?, images.dtype(), &Device::Cpu)? * self.0)?)
    }

    fn input_gradient(&self, images: &Tensor, _conditions: &Tensor) -> Result<Tensor> {
        Ok(images.zeros_like()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn disc(res: usize) -> Discriminator {
        Discriminator::new(
            DiscriminatorConfig {
                condition_dim: 2,
                resolution: res,
                base_channels: 4,
                max_channels: 8,
            },
            11,
            DType::F64,
        )
        .unwrap()
    }

    #[test]
    fn channel_plan() {
        let d = disc(32);
        assert_eq!(d.config.channels().unwrap(), vec![4, 8, 8, 8]);
        assert!(DiscriminatorConfig { resolution: 24, ..d.config.clone() }.blocks().is_err());
    }

    #[test]
    fn explicit_input_gradient_matches_autograd() {
        let d = disc(16);
        let x = Var::from_tensor(&Tensor::rand(0.0, 1.0, (3, 16, 16, 3), &Device::Cpu).unwrap()).unwrap();
        let c = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0], [0.3, 2.0]], &Device::Cpu).unwrap();
        let grads = d.logits(x.as_tensor(), &c).unwrap().sum_all().unwrap().backward().unwrap();
        let auto = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let explicit = d.input_gradient(x.as_tensor(), &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, e) in auto.iter().zip(&explicit) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_difference_in_parameters() {
        // d/dtheta ||grad_x D||^2 via double backprop vs central differences.
        let d = disc(8);
        let x = Tensor::rand(0.0, 1.0, (2, 8, 8, 3), &Device::Cpu).unwrap();
        let c = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let penalty = |d: &Discriminator| d.input_gradient(&x, &c).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = penalty(&d).backward().unwrap();
        for name in ["disc.stem.weight", "disc.block0.conv0.weight", "disc.embed.weight", "disc.head.weight"] {
            let var = d.params.get(name).unwrap();
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for idx in [0usize, base.len() / 2, base.len() - 1] {
                let eps = 1e-5;
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                    penalty(&d).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                eval(0.0);
                assert!((fd - g[idx]).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{idx}]: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let d = disc(8);
        let x = Tensor::zeros((2, 16, 16, 3), DType::F64, &Device::Cpu).unwrap();
        let c = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(d.logits(&x, &c).is_err());
        let x = Tensor::zeros((2, 8, 8, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(d.logits(&x, &Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap()).is_err());
    }
}
