//! Positional encoding, object poses and the conditional generative feature
//! field decoder.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::conditioning::{rows_tensor, ConditionalEncodings};
use crate::error::{bail_arg, Result};
use crate::nn::{to_vec_f64, Linear, ParamBuilder};

/// `(sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p), cos(2^{L-1} pi p))`.
pub fn positional_encoding(p: f64, octaves: usize) -> Result<Vec<f64>> {
    if octaves < 1 {
        bail_arg!("positional encoding needs at least one octave");
    }
    let mut out = Vec::with_capacity(2 * octaves);
    push_encoding(&mut out, p, octaves);
    Ok(out)
}

#[inline]
fn push_encoding(out: &mut Vec<f64>, p: f64, octaves: usize) {
    let mut freq = PI;
    for _ in 0..octaves {
        let (s, c) = (freq * p).sin_cos();
        out.push(s);
        out.push(c);
        freq *= 2.0;
    }
}

pub(crate) fn push_vec3_encoding(out: &mut Vec<f64>, v: [f64; 3], octaves: usize) {
    for p in v {
        push_encoding(out, p, octaves);
    }
}

/// Encodes each coordinate of a point; output length `6 * octaves`.
pub fn encode_point(x: [f64; 3], octaves: usize) -> Result<Vec<f64>> {
    if octaves < 1 {
        bail_arg!("positional encoding needs at least one octave");
    }
    let mut out = Vec::with_capacity(6 * octaves);
    push_vec3_encoding(&mut out, x, octaves);
    Ok(out)
}

/// Encodes a unit viewing direction; output length `6 * octaves`.
pub fn encode_direction(d: [f64; 3], octaves: usize) -> Result<Vec<f64>> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        bail_arg!("direction must be unit length, |d| = {norm}");
    }
    encode_point(d, octaves)
}

/// Affine placement of an object: `x_scene = R diag(s) x_obj + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub scale: [f64; 3],
    pub translation: [f64; 3],
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
}

impl Default for ObjectPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl ObjectPose {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            translation: [0.0; 3],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Builds a pose from roll/pitch/yaw angles in degrees (applied about x, y, z).
    pub fn from_euler_degrees(scale: [f64; 3], translation: [f64; 3], euler_deg: [f64; 3]) -> Result<Self> {
        let r = Rotation3::from_euler_angles(
            euler_deg[0].to_radians(),
            euler_deg[1].to_radians(),
            euler_deg[2].to_radians(),
        );
        let m = r.matrix();
        let pose = Self {
            scale,
            translation,
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail_arg!("object scale must be positive, got {:?}", self.scale);
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            bail_arg!("object translation must be finite");
        }
        let r = self.rotation_matrix();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            bail_arg!("rotation is not a proper rotation (det {det}, orthogonality error {ortho})");
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Rotates the object about the world up axis (z) by `degrees`.
    /// Whole turns (including 0) return the pose unchanged.
    pub fn rotated_about_up(&self, degrees: f64) -> Self {
        if degrees.rem_euclid(360.0) == 0.0 {
            return self.clone();
        }
        let extra = Rotation3::from_axis_angle(&Vector3::z_axis(), degrees.to_radians());
        let m = extra.matrix() * self.rotation_matrix();
        let mut out = self.clone();
        out.rotation = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        out
    }

    /// `diag(1/s) R^T (x - t)`.
    pub fn to_object_space(&self, x_scene: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            x_scene[0] - self.translation[0],
            x_scene[1] - self.translation[1],
            x_scene[2] - self.translation[2],
        ];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2]) / self.scale[i];
        }
        out
    }

    /// `R diag(s) x + t`.
    pub fn from_object_space(&self, x_obj: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let s = [x_obj[0] * self.scale[0], x_obj[1] * self.scale[1], x_obj[2] * self.scale[2]];
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * s[0] + r[i][1] * s[1] + r[i][2] * s[2];
        }
        out
    }

    /// `R^T d`, the viewing direction expressed in the object frame (stays unit length).
    pub fn direction_to_object_space(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

/// Density and feature at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub point_octaves: usize,
    pub direction_octaves: usize,
    pub shape_dim: usize,
    pub appearance_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    /// Block index before which the embedded input is added back in.
    pub skip_block: Option<usize>,
    pub feature_dim: usize,
    /// Multiplier applied to (object- or scene-space) coordinates before encoding.
    pub input_scale: f64,
}

impl FieldConfig {
    pub fn point_encoding_dim(&self) -> usize {
        6 * self.point_octaves
    }

    pub fn direction_encoding_dim(&self) -> usize {
        6 * self.direction_octaves
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_octaves == 0 || self.direction_octaves == 0 {
            bail_arg!("octave counts must be positive");
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.blocks == 0 {
            bail_arg!("hidden width, feature dim and block count must be positive");
        }
        if self.shape_dim == 0 || self.appearance_dim == 0 {
            bail_arg!("latent dims must be positive");
        }
        if let Some(s) = self.skip_block {
            if s == 0 || s >= self.blocks {
                bail_arg!("skip block {s} must lie strictly inside 1..{}", self.blocks);
            }
        }
        if !(self.input_scale > 0.0) {
            bail_arg!("input scale must be positive");
        }
        Ok(())
    }
}

/// Fully connected residual block: `x + fc1(relu(fc0(relu(x))))`.
#[derive(Debug, Clone)]
struct ResBlockFc {
    fc0: Linear,
    fc1: Linear,
}

impl ResBlockFc {
    fn new(pb: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            fc0: Linear::new(pb, &format!("{name}.fc0"), width, width)?,
            fc1: Linear::new(pb, &format!("{name}.fc1"), width, width)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc0.forward(&x.relu()?)?;
        let dx = self.fc1.forward(&h.relu()?)?;
        Ok((x + dx)?)
    }
}

/// Per-point inputs of [`FieldDecoder::forward`].
///
/// `shape_codes`/`appearance_codes` hold one row per code; with `code_index`
/// set, point `p` uses row `code_index[p]`, otherwise rows align with points.
pub struct FieldInputs<'a> {
    pub points: &'a Tensor,
    pub directions: &'a Tensor,
    pub shape_codes: &'a Tensor,
    pub appearance_codes: &'a Tensor,
    pub code_index: Option<&'a Tensor>,
}

/// Batched field output: `sigma (P)`, `features (P, M_f)`.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    pub sigma: Tensor,
    pub features: Tensor,
}

/// The generative feature field `h(gamma(x), gamma(d), c_s, c_a) -> (sigma, f)`.
///
/// The encoded point and shape code are embedded and multiplied, passed
/// through residual FC blocks, and read out by the density head. Direction and
/// appearance enter only after the density head, so density is view- and
/// appearance-independent.
#[derive(Debug, Clone)]
pub struct FieldDecoder {
    pub config: FieldConfig,
    embed_point: Linear,
    embed_shape: Linear,
    blocks: Vec<ResBlockFc>,
    density_head: Linear,
    embed_direction: Linear,
    embed_appearance: Linear,
    feature_head: Linear,
}

impl FieldDecoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let blocks = (0..config.blocks)
            .map(|i| ResBlockFc::new(pb, &format!("{name}.block{i}"), h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed_point: Linear::new(pb, &format!("{name}.embed_point"), config.point_encoding_dim(), h)?,
            embed_shape: Linear::new(pb, &format!("{name}.embed_shape"), config.shape_dim, h)?,
            blocks,
            density_head: Linear::new(pb, &format!("{name}.density"), h, 1)?,
            embed_direction: Linear::new(pb, &format!("{name}.embed_direction"), config.direction_encoding_dim(), h)?,
            embed_appearance: Linear::new(pb, &format!("{name}.embed_appearance"), config.appearance_dim, h)?,
            feature_head: Linear::new(pb, &format!("{name}.feature"), h, config.feature_dim)?,
            config,
        })
    }

    pub fn dtype(&self) -> DType {
        self.density_head.weight.dtype()
    }

    fn per_point(codes: Tensor, index: Option<&Tensor>) -> Result<Tensor> {
        Ok(match index {
            Some(idx) => codes.index_select(idx, 0)?,
            None => codes,
        })
    }

    pub fn forward(&self, inputs: &FieldInputs) -> Result<FieldOutput> {
        let cfg = &self.config;
        let (p, xd) = inputs.points.dims2()?;
        let (pd, dd) = inputs.directions.dims2()?;
        if xd != cfg.point_encoding_dim() || dd != cfg.direction_encoding_dim() || pd != p {
            bail_arg!(
                "field inputs {:?}/{:?} do not match encoding dims ({}, {})",
                inputs.points.dims(),
                inputs.directions.dims(),
                cfg.point_encoding_dim(),
                cfg.direction_encoding_dim()
            );
        }
        let (rows_s, ms) = inputs.shape_codes.dims2()?;
        let (rows_a, ma) = inputs.appearance_codes.dims2()?;
        if ms != cfg.shape_dim || ma != cfg.appearance_dim || rows_s != rows_a {
            bail_arg!("conditional encodings have shape {ms}/{ma}, expected {}/{}", cfg.shape_dim, cfg.appearance_dim);
        }
        match inputs.code_index {
            Some(idx) if idx.dims1()? != p => bail_arg!("code index must have one entry per point"),
            None if rows_s != p => bail_arg!("expected one code row per point ({rows_s} != {p})"),
            _ => {}
        }

        let shape_emb = Self::per_point(self.embed_shape.forward(inputs.shape_codes)?, inputs.code_index)?;
        let embedded = (self.embed_point.forward(inputs.points)? * shape_emb)?;
        let mut net = embedded.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            if cfg.skip_block == Some(i) {
                net = (net + &embedded)?;
            }
            net = block.forward(&net)?;
        }
        let sigma = self.density_head.forward(&net.relu()?)?.relu()?.squeeze(1)?;

        let app_emb = Self::per_point(self.embed_appearance.forward(inputs.appearance_codes)?, inputs.code_index)?;
        let view = (self.embed_direction.forward(inputs.directions)? + app_emb)?;
        let features = self.feature_head.forward(&(net + view)?.relu()?)?;
        Ok(FieldOutput { sigma, features })
    }

    /// Evaluates encoded points/directions for one set of conditional encodings.
    pub fn eval_samples(
        &self,
        points_enc: &[Vec<f64>],
        directions_enc: &[Vec<f64>],
        enc: &ConditionalEncodings,
    ) -> Result<Vec<FieldSample>> {
        if points_enc.len() != directions_enc.len() {
            bail_arg!("{} points but {} directions", points_enc.len(), directions_enc.len());
        }
        if points_enc.is_empty() {
            return Ok(Vec::new());
        }
        let dtype = self.dtype();
        let x = rows_tensor(&points_enc.iter().map(Vec::as_slice).collect::<Vec<_>>(), dtype)?;
        let d = rows_tensor(&directions_enc.iter().map(Vec::as_slice).collect::<Vec<_>>(), dtype)?;
        let cs = rows_tensor(&[&enc.shape], dtype)?;
        let ca = rows_tensor(&[&enc.appearance], dtype)?;
        let idx = Tensor::zeros(points_enc.len(), DType::U32, &Device::Cpu)?;
        let out = self.forward(&FieldInputs {
            points: &x,
            directions: &d,
            shape_codes: &cs,
            appearance_codes: &ca,
            code_index: Some(&idx),
        })?;
        let sigma = to_vec_f64(&out.sigma)?;
        let feats = to_vec_f64(&out.features)?;
        let m_f = self.config.feature_dim;
        Ok(sigma
            .into_iter()
            .enumerate()
            .map(|(i, s)| FieldSample {
                sigma: s,
                feature: feats[i * m_f..(i + 1) * m_f].to_vec(),
            })
            .collect())
    }
}
