//! Condition vectors, latent priors and the conditional latent projection.
//!
//! A condition vector `c` is encoded by one affine layer per latent kind and
//! multiplied element-wise into the sampled latent:
//! `c_s = L_s(c) * z_s`, `c_a = L_a(c) * z_a`.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};
use crate::nn::{to_vec_f64, Linear, ParamBuilder};

/// Condition values outside this interval trigger a warning at inference.
pub const SAFE_CONDITION_RANGE: (f64, f64) = (-1.0, 5.0);

/// Continuous label vector; binary/one-hot at training time, any real at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            bail_arg!("one-hot index {index} out of range for {len} classes");
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.0.len() != expected {
            bail_arg!("condition has {} entries, expected {expected}", self.0.len());
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            bail_arg!("condition contains non-finite values");
        }
        Ok(())
    }

    /// True when every entry is 0 or 1 (the values seen during training).
    pub fn is_training_valued(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Warning text when an entry leaves [`SAFE_CONDITION_RANGE`].
    pub fn extrapolation_warning(&self) -> Option<String> {
        let (lo, hi) = SAFE_CONDITION_RANGE;
        let bad: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < lo || v > hi)
            .map(|(i, v)| format!("c[{i}]={v}"))
            .collect();
        if bad.is_empty() {
            None
        } else {
            Some(format!(
                "condition values {} lie outside [{lo}, {hi}]; strongly extrapolated conditions degrade samples",
                bad.join(", ")
            ))
        }
    }

    /// `(1 - alpha) * a + alpha * b`.
    pub fn lerp(a: &Self, b: &Self, alpha: f64) -> Result<Self> {
        if a.len() != b.len() {
            bail_arg!("cannot interpolate conditions of length {} and {}", a.len(), b.len());
        }
        Ok(Self(
            a.0.iter().zip(&b.0).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect(),
        ))
    }
}

/// Shape and appearance noise codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCodes {
    pub shape: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl LatentCodes {
    pub fn lerp(a: &Self, b: &Self, alpha: f64) -> Result<Self> {
        if a.shape.len() != b.shape.len() || a.appearance.len() != b.appearance.len() {
            bail_arg!("cannot interpolate latents of different sizes");
        }
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| (1.0 - alpha) * p + alpha * q).collect()
        };
        Ok(Self {
            shape: mix(&a.shape, &b.shape),
            appearance: mix(&a.appearance, &b.appearance),
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.iter().map(|v| v * alpha).collect(),
            appearance: self.appearance.iter().map(|v| v * alpha).collect(),
        }
    }

    fn check(&self, m_s: usize, m_a: usize) -> Result<()> {
        if self.shape.len() != m_s || self.appearance.len() != m_a {
            bail_arg!(
                "latent sizes ({}, {}) do not match configured ({m_s}, {m_a})",
                self.shape.len(),
                self.appearance.len()
            );
        }
        if self.shape.iter().chain(&self.appearance).any(|v| !v.is_finite()) {
            bail_arg!("latent codes contain non-finite values");
        }
        Ok(())
    }
}

/// Draws `batch` latent pairs with i.i.d. standard normal components.
pub fn sample_latents(batch: usize, m_s: usize, m_a: usize, seed: u64) -> Result<Vec<LatentCodes>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latents_with(&mut rng, batch, m_s, m_a)
}

pub fn sample_latents_with<R: Rng>(
    rng: &mut R,
    batch: usize,
    m_s: usize,
    m_a: usize,
) -> Result<Vec<LatentCodes>> {
    if batch == 0 || m_s == 0 || m_a == 0 {
        bail_arg!("batch ({batch}) and latent dims ({m_s}, {m_a}) must be positive");
    }
    Ok((0..batch)
        .map(|_| LatentCodes {
            shape: (0..m_s).map(|_| rng.sample(StandardNormal)).collect(),
            appearance: (0..m_a).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect())
}

/// Result of projecting a condition onto a latent pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEncodings {
    pub shape: Vec<f64>,
    pub appearance: Vec<f64>,
}

/// The label-encoding layers `L_s: R^{M_c} -> R^{M_s}` and `L_a: R^{M_c} -> R^{M_a}`.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub shape: Linear,
    pub appearance: Linear,
}

impl ConditionEncoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, m_c: usize, m_s: usize, m_a: usize) -> Result<Self> {
        if m_c == 0 || m_s == 0 || m_a == 0 {
            bail_arg!("condition encoder dims must be positive (M_c={m_c}, M_s={m_s}, M_a={m_a})");
        }
        Ok(Self {
            shape: Linear::new(pb, &format!("{name}.shape"), m_c, m_s)?,
            appearance: Linear::new(pb, &format!("{name}.appearance"), m_c, m_a)?,
        })
    }

    pub fn condition_dim(&self) -> usize {
        self.shape.in_dim()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape.out_dim()
    }

    pub fn appearance_dim(&self) -> usize {
        self.appearance.out_dim()
    }

    pub fn dtype(&self) -> DType {
        self.shape.weight.dtype()
    }

    /// Batched projection: `c (B, M_c)`, `z_s (B, M_s)`, `z_a (B, M_a)`.
    pub fn project(&self, c: &Tensor, z_s: &Tensor, z_a: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, m_c) = c.dims2()?;
        if m_c != self.condition_dim() {
            bail_arg!("condition batch has {m_c} columns, encoder expects {}", self.condition_dim());
        }
        if z_s.dims2()? != (b, self.shape_dim()) || z_a.dims2()? != (b, self.appearance_dim()) {
            bail_arg!(
                "latent batch shapes {:?}/{:?} do not match ({b}, {}) / ({b}, {})",
                z_s.dims(),
                z_a.dims(),
                self.shape_dim(),
                self.appearance_dim()
            );
        }
        let c_s = (self.shape.forward(c)? * z_s)?;
        let c_a = (self.appearance.forward(c)? * z_a)?;
        Ok((c_s, c_a))
    }
}

/// Builds a `(rows, cols)` tensor from equal-length rows.
pub fn rows_tensor(rows: &[&[f64]], dtype: DType) -> Result<Tensor> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        bail_arg!("ragged rows");
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rows.len(), cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Single-sample projection `(L_s(c) * z_s, L_a(c) * z_a)`.
pub fn project_condition(
    c: &ConditionVector,
    z: &LatentCodes,
    encoder: &ConditionEncoder,
) -> Result<ConditionalEncodings> {
    c.check_len(encoder.condition_dim())?;
    z.check(encoder.shape_dim(), encoder.appearance_dim())?;
    let dtype = encoder.dtype();
    let ct = rows_tensor(&[c.values()], dtype)?;
    let zs = rows_tensor(&[&z.shape], dtype)?;
    let za = rows_tensor(&[&z.appearance], dtype)?;
    let (c_s, c_a) = encoder.project(&ct, &zs, &za)?;
    Ok(ConditionalEncodings {
        shape: to_vec_f64(&c_s)?,
        appearance: to_vec_f64(&c_a)?,
    })
}
