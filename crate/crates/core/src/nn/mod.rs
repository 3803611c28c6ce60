//! Small neural-network toolkit on top of candle: named parameter stores,
//! affine and convolution layers in channels-last layout, and RMSprop.

pub mod optim;
pub mod spatial;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use optim::RmsProp;

/// Named trainable tensors. Layers keep clones of the same [`Var`]s, so
/// updating a value through the store is visible to every layer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Snapshot of all parameter values, detached from any graph.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }
}

/// Deterministic parameter initialiser writing into a [`ParamStore`].
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.var_from(name, data, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.var_from(name, vec![0.0; n], shape)
    }

    fn var_from(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.register(name.to_string(), var.clone())?;
        Ok(var)
    }
}

/// Affine map `y = x W + b` acting on the last axis of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = pb.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound)?;
        let bias = pb.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = pb.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound)?;
        Ok(Self { weight, bias: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.as_tensor())?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }

    /// Applies `W^T` to an output-space cotangent.
    pub fn transpose(&self, g: &Tensor) -> Result<Tensor> {
        Ok(g.matmul(&self.weight.as_tensor().t()?)?)
    }
}

/// Stride-1 "same" convolution over NHWC tensors with an odd square kernel.
///
/// The weight is stored as `(k*k*C_in, C_out)`, matching the patch layout
/// produced by [`spatial::im2col`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::build(pb, name, in_ch, out_ch, kernel, true)
    }

    pub fn no_bias(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::build(pb, name, in_ch, out_ch, kernel, false)
    }

    fn build(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
        }
        let fan_in = kernel * kernel * in_ch;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = pb.uniform(&format!("{name}.weight"), &[fan_in, out_ch], bound)?;
        let bias = if with_bias {
            Some(pb.uniform(&format!("{name}.bias"), &[out_ch], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::InvalidArgument(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let cols = if self.kernel == 1 {
            x.reshape((b * h * w, c))?
        } else {
            spatial::im2col(x, self.kernel)?.reshape((b * h * w, self.weight.dims()[0]))?
        };
        let mut y = cols.matmul(self.weight.as_tensor())?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(bias.as_tensor())?;
        }
        Ok(y.reshape((b, h, w, self.out_channels()))?)
    }

    /// Applies the adjoint of the (bias-free) convolution to an output cotangent.
    pub fn transpose(&self, g: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = g.dims4()?;
        let rows = g.reshape((b * h * w, c))?.matmul(&self.weight.as_tensor().t()?)?;
        if self.kernel == 1 {
            Ok(rows.reshape((b, h, w, self.in_channels()))?)
        } else {
            let cols = rows.reshape((b, h, w, self.weight.dims()[0]))?;
            Ok(spatial::col2im(&cols, self.kernel)?)
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Logistic function via `tanh`, which stays finite (with finite gradients)
/// for arbitrarily large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Elementwise indicator `x > 0` in the dtype of `x`, detached from the graph.
pub fn positive_mask(x: &Tensor) -> Result<Tensor> {
    Ok(x.detach().gt(0.0)?.to_dtype(x.dtype())?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
