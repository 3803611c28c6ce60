//! The full generator: scene sampling, batched feature-field rendering and
//! the neural renderer.

use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{generate_rays, sample_camera_with, stratified_depths_with, CameraPose, CameraRanges, Interval};
use super::neural::{NeuralRenderer, NeuralRendererConfig};
use super::volume::volume_render_tensor;
use super::RenderedImage;
use crate::conditioning::{rows_tensor, sample_latents_with, ConditionEncoder, ConditionVector, LatentCodes};
use crate::error::{bail_arg, Result};
use crate::fields::{push_vec3_encoding, FieldConfig, FieldDecoder, FieldInputs, ObjectPose};
use crate::nn::{ParamBuilder, ParamStore};
use crate::scene::{inside_object_box, Entity, SceneGraph, DENSITY_EPS};

/// Prior over object placements used when sampling training scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrior {
    /// Isotropic scale.
    pub scale: Interval,
    pub translation: [Interval; 3],
    /// Rotation about the world up axis.
    pub yaw_deg: Interval,
}

impl ObjectPrior {
    pub fn fixed(scale: f64) -> Self {
        Self {
            scale: Interval::fixed(scale),
            translation: [Interval::fixed(0.0); 3],
            yaw_deg: Interval::fixed(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate("object scale")?;
        if self.scale.lo <= 0.0 {
            bail_arg!("object scale prior must be positive");
        }
        for t in &self.translation {
            t.validate("object translation")?;
        }
        self.yaw_deg.validate("object yaw")
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<ObjectPose> {
        let s = self.scale.sample(rng);
        let t = [
            self.translation[0].sample(rng),
            self.translation[1].sample(rng),
            self.translation[2].sample(rng),
        ];
        let yaw = self.yaw_deg.sample(rng);
        ObjectPose::from_euler_degrees([s; 3], t, [0.0, 0.0, yaw])
    }

    /// Whether a pose lies inside the prior (up to `tol`).
    pub fn contains(&self, pose: &ObjectPose, tol: f64) -> bool {
        let s_ok = pose.scale.iter().all(|&s| s >= self.scale.lo - tol && s <= self.scale.hi + tol);
        let t_ok = (0..3).all(|i| {
            let v = pose.translation[i];
            v >= self.translation[i].lo - tol && v <= self.translation[i].hi + tol
        });
        s_ok && t_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub condition_dim: usize,
    pub object_field: FieldConfig,
    pub background_field: FieldConfig,
    pub renderer: NeuralRendererConfig,
    /// Whether the background latents are also projected by the condition.
    pub condition_background: bool,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub fov_deg: f64,
    pub camera: CameraRanges,
    pub object_prior: ObjectPrior,
}

impl GeneratorConfig {
    pub fn shape_dim(&self) -> usize {
        self.object_field.shape_dim
    }

    pub fn appearance_dim(&self) -> usize {
        self.object_field.appearance_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.object_field.feature_dim
    }

    pub fn feature_resolution(&self) -> usize {
        self.renderer.feature_resolution
    }

    pub fn output_resolution(&self) -> usize {
        self.renderer.output_resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.object_field.validate()?;
        self.background_field.validate()?;
        self.renderer.validate()?;
        self.camera.validate()?;
        self.object_prior.validate()?;
        let (o, b) = (&self.object_field, &self.background_field);
        if o.shape_dim != b.shape_dim || o.appearance_dim != b.appearance_dim {
            bail_arg!("object and background fields must share latent sizes");
        }
        if o.feature_dim != b.feature_dim || o.feature_dim != self.renderer.feature_dim {
            bail_arg!("object, background and renderer feature dims must agree");
        }
        if self.condition_dim == 0 {
            bail_arg!("condition dimension must be positive");
        }
        if self.samples_per_ray == 0 {
            bail_arg!("need at least one sample per ray");
        }
        if !(self.near > 0.0 && self.far > self.near) {
            bail_arg!("depth range must satisfy 0 < near < far");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            bail_arg!("field of view must lie in (0, 180)");
        }
        Ok(())
    }
}

/// A sampled training scene together with the camera it is viewed from.
#[derive(Debug, Clone)]
pub struct SampledScene {
    pub scene: SceneGraph,
    pub camera: CameraPose,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    pub encoder: ConditionEncoder,
    pub object_decoder: Arc<FieldDecoder>,
    pub background_decoder: Arc<FieldDecoder>,
    pub renderer: NeuralRenderer,
}

/// Per-decoder gather of the points one decoder has to evaluate.
struct PointGroup {
    decoder: Arc<FieldDecoder>,
    /// `(scene, entity)` pairs; row `k` of the code tensors belongs to `rows[k]`.
    rows: Vec<(usize, usize)>,
    points: Vec<f64>,
    directions: Vec<f64>,
    code_index: Vec<u32>,
    target: Vec<u32>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut pb = ParamBuilder::new(&mut params, seed);
        let encoder = ConditionEncoder::new(
            &mut pb,
            "gen.encoder",
            config.condition_dim,
            config.shape_dim(),
            config.appearance_dim(),
        )?;
        let object_decoder = Arc::new(FieldDecoder::new(&mut pb, "gen.object", config.object_field.clone())?);
        let background_decoder = Arc::new(FieldDecoder::new(&mut pb, "gen.background", config.background_field.clone())?);
        let renderer = NeuralRenderer::new(&mut pb, "gen.renderer", config.renderer.clone())?;
        Ok(Self {
            config,
            params,
            encoder,
            object_decoder,
            background_decoder,
            renderer,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Single object plus background, both sharing `condition`.
    pub fn scene(
        &self,
        condition: &ConditionVector,
        object: LatentCodes,
        pose: ObjectPose,
        background: LatentCodes,
    ) -> Result<SceneGraph> {
        condition.check_len(self.config.condition_dim)?;
        SceneGraph::new(vec![
            Entity {
                decoder: Arc::clone(&self.object_decoder),
                latents: object,
                condition: condition.clone(),
                pose,
                is_background: false,
            },
            Entity {
                decoder: Arc::clone(&self.background_decoder),
                latents: background,
                condition: condition.clone(),
                pose: ObjectPose::identity(),
                is_background: true,
            },
        ])
    }

    /// Draws latents, an object pose from the prior and a camera from the camera prior.
    pub fn sample_scene<R: Rng>(&self, condition: &ConditionVector, rng: &mut R) -> Result<SampledScene> {
        let (m_s, m_a) = (self.config.shape_dim(), self.config.appearance_dim());
        let object = sample_latents_with(rng, 1, m_s, m_a)?.remove(0);
        let background = sample_latents_with(rng, 1, m_s, m_a)?.remove(0);
        let pose = self.config.object_prior.sample(rng)?;
        let camera = sample_camera_with(rng, &self.config.camera)?;
        Ok(SampledScene {
            scene: self.scene(condition, object, pose, background)?,
            camera,
        })
    }

    /// Differentiable `(B, H_V, W_V, M_f)` feature images. Depths are jittered
    /// when `jitter` is given and bin midpoints otherwise.
    pub fn feature_images<R: Rng>(
        &self,
        scenes: &[SceneGraph],
        cameras: &[CameraPose],
        mut jitter: Option<&mut R>,
    ) -> Result<Tensor> {
        if scenes.is_empty() || scenes.len() != cameras.len() {
            bail_arg!("need one camera per scene ({} scenes, {} cameras)", scenes.len(), cameras.len());
        }
        let cfg = &self.config;
        let (hv, n, m_f) = (cfg.feature_resolution(), cfg.samples_per_ray, cfg.feature_dim());
        let rays_per_image = hv * hv;
        let total = scenes.len() * rays_per_image * n;
        let dtype = self.dtype();

        let mut groups: Vec<PointGroup> = Vec::new();
        let mut group_of: HashMap<*const FieldDecoder, usize> = HashMap::new();
        let mut deltas = Vec::with_capacity(total);

        for (b, (scene, camera)) in scenes.iter().zip(cameras).enumerate() {
            scene.validate()?;
            for e in &scene.entities {
                if e.decoder.config.feature_dim != m_f {
                    bail_arg!("entity feature dim {} != {m_f}", e.decoder.config.feature_dim);
                }
                e.condition.check_len(cfg.condition_dim)?;
            }
            let rays = generate_rays(camera, hv, hv, cfg.fov_deg)?;
            let mut points = Vec::with_capacity(rays_per_image * n);
            for d in &rays.directions {
                let depths = stratified_depths_with(cfg.near, cfg.far, n, jitter.as_deref_mut())?;
                for (t, delta) in depths.t.iter().zip(&depths.delta) {
                    points.push([
                        rays.origin[0] + t * d[0],
                        rays.origin[1] + t * d[1],
                        rays.origin[2] + t * d[2],
                    ]);
                    deltas.push(*delta);
                }
            }
            let base = b * rays_per_image * n;
            for (ei, e) in scene.entities.iter().enumerate() {
                let key = Arc::as_ptr(&e.decoder);
                let gi = *group_of.entry(key).or_insert_with(|| {
                    groups.push(PointGroup {
                        decoder: Arc::clone(&e.decoder),
                        rows: Vec::new(),
                        points: Vec::new(),
                        directions: Vec::new(),
                        code_index: Vec::new(),
                        target: Vec::new(),
                    });
                    groups.len() - 1
                });
                let group = &mut groups[gi];
                let row = group.rows.len() as u32;
                group.rows.push((b, ei));
                let fc = &e.decoder.config;
                let mut dir_enc = Vec::with_capacity(6 * fc.direction_octaves);
                for (r, d) in rays.directions.iter().enumerate() {
                    dir_enc.clear();
                    push_vec3_encoding(&mut dir_enc, e.pose.direction_to_object_space(*d), fc.direction_octaves);
                    for j in 0..n {
                        let idx = r * n + j;
                        let x_obj = e.pose.to_object_space(points[idx]);
                        if !e.is_background && !inside_object_box(x_obj) {
                            continue;
                        }
                        push_vec3_encoding(&mut group.points, x_obj.map(|v| v * fc.input_scale), fc.point_octaves);
                        group.directions.extend_from_slice(&dir_enc);
                        group.code_index.push(row);
                        group.target.push((base + idx) as u32);
                    }
                }
            }
        }

        let device = Device::Cpu;
        let mut sigma_total = Tensor::zeros(total, dtype, &device)?;
        let mut weighted = Tensor::zeros((total, m_f), dtype, &device)?;
        for group in &groups {
            let p = group.target.len();
            if p == 0 {
                continue;
            }
            let fc = &group.decoder.config;
            let (shape_codes, appearance_codes) = self.group_codes(scenes, &group.rows)?;
            let points = Tensor::from_vec(group.points.clone(), (p, fc.point_encoding_dim()), &device)?.to_dtype(dtype)?;
            let directions =
                Tensor::from_vec(group.directions.clone(), (p, fc.direction_encoding_dim()), &device)?.to_dtype(dtype)?;
            let code_index = Tensor::from_slice(&group.code_index, p, &device)?;
            let out = group.decoder.forward(&FieldInputs {
                points: &points,
                directions: &directions,
                shape_codes: &shape_codes,
                appearance_codes: &appearance_codes,
                code_index: Some(&code_index),
            })?;
            let target = Tensor::from_slice(&group.target, p, &device)?;
            weighted = weighted.index_add(&target, &out.features.broadcast_mul(&out.sigma.unsqueeze(1)?)?, 0)?;
            sigma_total = sigma_total.index_add(&target, &out.sigma, 0)?;
        }

        // Density-weighted mean feature, zero where the composite density vanishes.
        let mask = sigma_total.detach().gt(DENSITY_EPS)?.to_dtype(dtype)?;
        let safe = ((&sigma_total * &mask)? + (1.0 - &mask)?)?;
        let features = weighted.broadcast_mul(&(mask / safe)?.unsqueeze(1)?)?;

        let rays = scenes.len() * rays_per_image;
        let delta = Tensor::from_vec(deltas, (rays, n), &device)?.to_dtype(dtype)?;
        let pixels = volume_render_tensor(
            &sigma_total.reshape((rays, n))?,
            &features.reshape((rays, n, m_f))?,
            &delta,
        )?;
        Ok(pixels.reshape((scenes.len(), hv, hv, m_f))?)
    }

    /// Shape/appearance code rows for the given `(scene, entity)` pairs.
    fn group_codes(&self, scenes: &[SceneGraph], rows: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let dtype = self.dtype();
        let entities: Vec<&Entity> = rows.iter().map(|&(b, e)| &scenes[b].entities[e]).collect();
        for e in &entities {
            if e.latents.shape.len() != self.config.shape_dim()
                || e.latents.appearance.len() != self.config.appearance_dim()
            {
                bail_arg!("latent sizes do not match the generator configuration");
            }
        }
        let z_s = rows_tensor(&entities.iter().map(|e| e.latents.shape.as_slice()).collect::<Vec<_>>(), dtype)?;
        let z_a = rows_tensor(&entities.iter().map(|e| e.latents.appearance.as_slice()).collect::<Vec<_>>(), dtype)?;
        let conditioned: Vec<bool> = entities
            .iter()
            .map(|e| !e.is_background || self.config.condition_background)
            .collect();
        if conditioned.iter().all(|&c| !c) {
            return Ok((z_s, z_a));
        }
        let c = rows_tensor(&entities.iter().map(|e| e.condition.values()).collect::<Vec<_>>(), dtype)?;
        let (c_s, c_a) = self.encoder.project(&c, &z_s, &z_a)?;
        if conditioned.iter().all(|&c| c) {
            return Ok((c_s, c_a));
        }
        let sel: Vec<f64> = conditioned.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let sel = Tensor::from_vec(sel, (rows.len(), 1), &Device::Cpu)?.to_dtype(dtype)?;
        let keep = (1.0 - &sel)?;
        let mix = |proj: &Tensor, raw: &Tensor| -> Result<Tensor> {
            Ok((proj.broadcast_mul(&sel)? + raw.broadcast_mul(&keep)?)?)
        };
        Ok((mix(&c_s, &z_s)?, mix(&c_a, &z_a)?))
    }

    /// Differentiable `(B, H, W, 3)` images in `[0, 1]`.
    pub fn render<R: Rng>(&self, scenes: &[SceneGraph], cameras: &[CameraPose], jitter: Option<&mut R>) -> Result<Tensor> {
        let features = self.feature_images(scenes, cameras, jitter)?;
        self.renderer.forward(&features)
    }

    /// Deterministic (midpoint depth) renders, converted to images.
    pub fn render_images(&self, scenes: &[SceneGraph], cameras: &[CameraPose]) -> Result<Vec<RenderedImage>> {
        let t = self.render::<rand_chacha::ChaCha8Rng>(scenes, cameras, None)?;
        RenderedImage::from_tensor(&t)
    }

    pub fn render_image(&self, scene: &SceneGraph, camera: &CameraPose) -> Result<RenderedImage> {
        Ok(self.render_images(std::slice::from_ref(scene), std::slice::from_ref(camera))?.remove(0))
    }
}
