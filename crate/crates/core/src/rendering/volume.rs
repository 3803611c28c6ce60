//! Numerical volume rendering of feature fields along rays.

use candle_core::{Tensor, D};

use crate::error::{bail_arg, Result};

/// One sample along a ray: composite density, composite feature, spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub sigma: f64,
    pub feature: Vec<f64>,
    pub delta: f64,
}

/// Compositing weights `w_j = T_j (1 - exp(-sigma_j delta_j))` with
/// transmittance `T_j = prod_{k<j} exp(-sigma_k delta_k)`.
pub fn render_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        bail_arg!("{} densities but {} spacings", sigmas.len(), deltas.len());
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = 1.0f64;
    for (&s, &d) in sigmas.iter().zip(deltas) {
        if !(s >= 0.0) || !s.is_finite() {
            bail_arg!("density must be finite and non-negative, got {s}");
        }
        if !(d > 0.0) || !d.is_finite() {
            bail_arg!("sample spacing must be positive, got {d}");
        }
        let x = s * d;
        weights.push(transmittance * -(-x).exp_m1());
        transmittance *= (-x).exp();
    }
    Ok(weights)
}

/// Feature accumulated along a single ray.
pub fn volume_render(samples: &[RaySample]) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        bail_arg!("cannot render a ray without samples");
    };
    let dim = first.feature.len();
    if let Some(bad) = samples.iter().find(|s| s.feature.len() != dim) {
        bail_arg!("feature length mismatch along ray: {} vs {dim}", bad.feature.len());
    }
    let sigmas: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let weights = render_weights(&sigmas, &deltas)?;
    let mut out = vec![0.0; dim];
    for (w, s) in weights.iter().zip(samples) {
        for (o, f) in out.iter_mut().zip(&s.feature) {
            *o += w * f;
        }
    }
    Ok(out)
}

/// Batched, differentiable form: `sigma (R, N)`, `features (R, N, F)`,
/// `delta (R, N)` to `(R, F)`.
pub fn volume_render_tensor(sigma: &Tensor, features: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let (r, n) = sigma.dims2()?;
    let (r2, n2, _) = features.dims3()?;
    if (r, n) != (r2, n2) || delta.dims() != sigma.dims() {
        bail_arg!(
            "volume render shapes disagree: sigma {:?}, features {:?}, delta {:?}",
            sigma.dims(),
            features.dims(),
            delta.dims()
        );
    }
    let w = weights_tensor(sigma, delta)?;
    Ok(w.unsqueeze(D::Minus2)?.matmul(features)?.squeeze(D::Minus2)?)
}

/// Compositing weights `(R, N)` for batched densities and spacings.
pub fn weights_tensor(sigma: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let n = sigma.dim(1)?;
    let sd = (sigma * delta)?;
    // Exclusive prefix sum via a strictly upper-triangular matrix.
    let tri: Vec<f64> = (0..n * n).map(|i| if i / n < i % n { 1.0 } else { 0.0 }).collect();
    let tri = Tensor::from_vec(tri, (n, n), sigma.device())?.to_dtype(sigma.dtype())?;
    let transmittance = sd.matmul(&tri)?.neg()?.exp()?;
    Ok((transmittance * (1.0 - sd.neg()?.exp()?)?)?)
}
