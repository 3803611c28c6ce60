//! Fréchet distances, toy embeddings, FID reports and figure-style render grids.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::color::{hue_difference, mean_foreground_hue, ForegroundThreshold};
use crate::conditioning::{sample_latents, ConditionVector, LatentCodes};
use crate::error::{bail_arg, Error, Result};
use crate::fields::ObjectPose;
use crate::nn::spatial::avg_pool2x;
use crate::nn::{Conv2d, ParamBuilder, ParamStore};
use crate::rendering::camera::{cross, normalize};
use crate::rendering::{CameraPose, Generator, RenderedImage};
use crate::scene::{replicate_object, SceneGraph};

/// Eigenvalues of the symmetric square-root product below this are treated as
/// numerical noise and clamped to zero.
pub const EIGEN_CLAMP: f64 = -1e-6;
pub const SHRINKAGE: f64 = 1e-6;

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2})`, with the trace of the
/// root computed from the eigenvalues of `C1^{1/2} C2 C1^{1/2}`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let n = mu1.len();
    if mu2.len() != n || cov1.shape() != (n, n) || cov2.shape() != (n, n) {
        bail_arg!(
            "moment dimensions disagree: mu {} / {}, cov {:?} / {:?}",
            n,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        );
    }
    let s1 = symmetric_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let eig = SymmetricEigen::new(0.5 * (&inner + inner.transpose()));
    let mut trace_root = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < EIGEN_CLAMP {
            log::warn!("covariance product has eigenvalue {v:.3e}; clamping to zero");
        }
        trace_root += v.max(0.0).sqrt();
    }
    let diff = mu1 - mu2;
    let d = diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * trace_root;
    Ok(d.max(0.0))
}

/// Sample mean and (unbiased) covariance of feature rows.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianMoments {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            bail_arg!("cannot fit moments to zero samples");
        };
        let dim = first.len();
        if features.iter().any(|f| f.len() != dim) {
            bail_arg!("ragged feature rows");
        }
        let n = features.len();
        let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
        let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
        let centred = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
        let mut cov = if n > 1 {
            centred.transpose() * &centred / (n as f64 - 1.0)
        } else {
            DMatrix::zeros(dim, dim)
        };
        if n < dim + 1 {
            log::warn!("only {n} samples for {dim}-dimensional features; adding {SHRINKAGE:e} * I");
            cov += DMatrix::identity(dim, dim) * SHRINKAGE;
        }
        Ok(Self { mean, cov, count: n })
    }
}

/// Image-to-feature map used for FID.
pub trait EmbeddingModel {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[RenderedImage]) -> Result<Vec<Vec<f64>>>;
}

/// Fixed random convolutional features: two conv/ReLU/pool stages whose
/// spatial means and standard deviations are concatenated.
#[derive(Debug, Clone)]
pub struct RandomConvEmbedding {
    seed: u64,
    params: ParamStore,
    conv0: Conv2d,
    conv1: Conv2d,
}

impl RandomConvEmbedding {
    pub const DEFAULT_SEED: u64 = 0x5EED_F1D;

    pub fn new(seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(DType::F64);
        let mut pb = ParamBuilder::new(&mut params, seed);
        let conv0 = Conv2d::new(&mut pb, "embed.conv0", 3, 16, 3)?;
        let conv1 = Conv2d::new(&mut pb, "embed.conv1", 16, 32, 3)?;
        Ok(Self { seed, params, conv0, conv1 })
    }

    /// Same architecture with weights read from a safetensors file
    /// (`embed.conv0.weight`, `embed.conv0.bias`, `embed.conv1.*`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let loaded = candle_core::safetensors::load(path, &candle_core::Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let model = Self::new(0)?;
        let tensors: BTreeMap<String, Tensor> = loaded
            .into_iter()
            .map(|(k, v)| v.to_dtype(DType::F64).map(|v| (k, v)))
            .collect::<candle_core::Result<_>>()?;
        model.params.load(&tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.params.snapshot().into_iter().collect();
        candle_core::safetensors::save(&map, path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

impl EmbeddingModel for RandomConvEmbedding {
    fn id(&self) -> String {
        format!("random-conv-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        2 * (16 + 32)
    }

    fn embed(&self, images: &[RenderedImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = RenderedImage::stack(chunk, DType::F64)?.affine(2.0, -1.0)?;
            let h0 = self.conv0.forward(&x)?.relu()?;
            let h1 = self.conv1.forward(&avg_pool2x(&h0)?)?.relu()?;
            let stats = |h: &Tensor| -> Result<(Tensor, Tensor)> {
                let (b, hh, ww, c) = h.dims4()?;
                let flat = h.reshape((b, hh * ww, c))?;
                let mean = flat.mean(1)?;
                let var = flat.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(1)?;
                Ok((mean, var.sqrt()?))
            };
            let (m0, s0) = stats(&h0)?;
            let (m1, s1) = stats(&h1)?;
            let feats = Tensor::cat(&[m0, s0, m1, s1], 1)?.to_vec2::<f64>()?;
            out.extend(feats);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub per_class: BTreeMap<String, f64>,
    pub real_count: usize,
    pub fake_count: usize,
    pub embedding: String,
}

pub fn fid_from_features(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let a = GaussianMoments::fit(real)?;
    let b = GaussianMoments::fit(fake)?;
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Overall FID between two image sets.
pub fn compute_fid(real: &[RenderedImage], fake: &[RenderedImage], embedding: &dyn EmbeddingModel) -> Result<FidReport> {
    compute_fid_by_class(real, &[], fake, &[], &[], embedding)
}

/// FID plus one entry per class: fakes are filtered by the class they were
/// conditioned on and reals by their manifest class. Classes with fewer than
/// two samples on either side are omitted.
pub fn compute_fid_by_class(
    real: &[RenderedImage],
    real_classes: &[Option<usize>],
    fake: &[RenderedImage],
    fake_classes: &[Option<usize>],
    class_names: &[String],
    embedding: &dyn EmbeddingModel,
) -> Result<FidReport> {
    if real.is_empty() || fake.is_empty() {
        bail_arg!("FID needs non-empty real and fake sets");
    }
    let fr = embedding.embed(real)?;
    let ff = embedding.embed(fake)?;
    let fid = fid_from_features(&fr, &ff)?;
    let mut per_class = BTreeMap::new();
    if !class_names.is_empty() {
        if real_classes.len() != real.len() || fake_classes.len() != fake.len() {
            bail_arg!("class labels must align with the image sets");
        }
        for (k, name) in class_names.iter().enumerate() {
            let pick = |feats: &[Vec<f64>], labels: &[Option<usize>]| -> Vec<Vec<f64>> {
                feats.iter().zip(labels).filter(|(_, l)| **l == Some(k)).map(|(f, _)| f.clone()).collect()
            };
            let (r, f) = (pick(&fr, real_classes), pick(&ff, fake_classes));
            if r.len() < 2 || f.len() < 2 {
                log::warn!("class {name}: too few samples for FID ({} real, {} fake)", r.len(), f.len());
                continue;
            }
            per_class.insert(name.clone(), fid_from_features(&r, &f)?);
        }
    }
    Ok(FidReport {
        fid,
        per_class,
        real_count: real.len(),
        fake_count: fake.len(),
        embedding: embedding.id(),
    })
}

/// Samples one prior scene per condition (seeded by `seed`) and renders them
/// in chunks of `batch`.
pub fn generate_samples(gen: &Generator, conditions: &[ConditionVector], seed: u64, batch: usize) -> Result<Vec<RenderedImage>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(conditions.len());
    for chunk in conditions.chunks(batch.max(1)) {
        let (mut scenes, mut cameras) = (Vec::new(), Vec::new());
        for c in chunk {
            let s = gen.sample_scene(c, &mut rng)?;
            scenes.push(s.scene);
            cameras.push(s.camera);
        }
        out.extend(gen.render_images(&scenes, &cameras)?);
    }
    Ok(out)
}

/// Everything needed to regenerate one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    pub row: usize,
    pub col: usize,
    pub seed: u64,
    pub condition: ConditionVector,
    /// Object poses, first the original object then any replicas.
    pub object_poses: Vec<ObjectPose>,
    pub camera: CameraPose,
    /// Interpolation weight for latent interpolation tiles.
    pub latent_alpha: Option<f64>,
    pub latent_seed_b: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub seeds: Vec<u64>,
    pub tiles: Vec<TileMeta>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Grid {
    /// `tiles[row][col]`.
    pub tiles: Vec<Vec<RenderedImage>>,
    pub sidecar: GridSidecar,
}

impl Grid {
    /// All tiles stitched into one image.
    pub fn to_image(&self) -> RenderedImage {
        let (rows, cols) = (self.sidecar.rows, self.sidecar.cols);
        let (h, w) = (self.tiles[0][0].height, self.tiles[0][0].width);
        let width = cols * w;
        let mut data = vec![0.0; rows * h * width * 3];
        for (r, row) in self.tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                for i in 0..h {
                    let dst = ((r * h + i) * width + c * w) * 3;
                    data[dst..dst + w * 3].copy_from_slice(&tile.data[i * w * 3..(i + 1) * w * 3]);
                }
            }
        }
        RenderedImage {
            height: rows * h,
            width,
            data,
        }
    }

    /// Writes `<stem>.png` and `<stem>.json`.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        self.to_image().save_png(png_path)?;
        let json_path = png_path.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&self.sidecar)?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Per-row base sample: latents are drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub seed: u64,
    pub condition: ConditionVector,
}

/// Deterministic latents `(object, background)` of a seed.
pub fn seed_latents(gen: &Generator, seed: u64) -> Result<(LatentCodes, LatentCodes)> {
    let mut z = sample_latents(2, gen.config.shape_dim(), gen.config.appearance_dim(), seed)?;
    let bg = z.pop().expect("two codes");
    Ok((z.pop().expect("two codes"), bg))
}

/// Centre of the object prior.
pub fn canonical_pose(gen: &Generator) -> Result<ObjectPose> {
    let p = &gen.config.object_prior;
    let mid = |i: crate::rendering::Interval| 0.5 * (i.lo + i.hi);
    ObjectPose::from_euler_degrees(
        [mid(p.scale); 3],
        [mid(p.translation[0]), mid(p.translation[1]), mid(p.translation[2])],
        [0.0, 0.0, mid(p.yaw_deg)],
    )
}

pub fn canonical_camera(gen: &Generator) -> CameraPose {
    gen.config.camera.mean_pose()
}

/// Scene for one tile: `poses[0]` is the object, further poses add replicas
/// with latents derived from the tile seed.
pub fn tile_scene(gen: &Generator, seed: u64, object: LatentCodes, condition: &ConditionVector, poses: &[ObjectPose]) -> Result<SceneGraph> {
    let (_, background) = seed_latents(gen, seed)?;
    let mut scene = gen.scene(condition, object, poses[0].clone(), background)?;
    for (k, pose) in poses.iter().enumerate().skip(1) {
        let (extra, _) = seed_latents(gen, seed.wrapping_add(1_000_003 * k as u64))?;
        scene = replicate_object(&scene, 0, pose.clone(), condition.clone(), extra)?;
    }
    Ok(scene)
}

fn render_tiles(gen: &Generator, metas: Vec<TileMeta>, scenes: Vec<SceneGraph>, kind: &str, rows: usize, cols: usize, seeds: Vec<u64>, warnings: Vec<String>) -> Result<Grid> {
    let cameras: Vec<CameraPose> = metas.iter().map(|m| m.camera).collect();
    let mut images = Vec::with_capacity(scenes.len());
    for (s, c) in scenes.chunks(32).zip(cameras.chunks(32)) {
        images.extend(gen.render_images(s, c)?);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut it = images.into_iter();
    let tiles = (0..rows).map(|_| (0..cols).map(|_| it.next().expect("tile")).collect()).collect();
    Ok(Grid {
        tiles,
        sidecar: GridSidecar {
            kind: kind.to_string(),
            rows,
            cols,
            seeds,
            tiles: metas,
            warnings,
        },
    })
}

/// Relative object/camera yaw range seen during training, or `None` if every
/// relative angle was seen.
pub fn trained_rotation_range(gen: &Generator) -> Option<(f64, f64)> {
    let az = gen.config.camera.azimuth_deg;
    let yaw = gen.config.object_prior.yaw_deg;
    let (lo, hi) = (yaw.lo - az.hi, yaw.hi - az.lo);
    (hi - lo < 360.0).then_some((lo, hi))
}

/// Warning emitted for rotations outside the trained range.
pub fn rotation_warning(gen: &Generator, base: &ObjectPose, camera: &CameraPose, angle_deg: f64) -> Option<String> {
    let (lo, hi) = trained_rotation_range(gen)?;
    let base_yaw = base.rotation[1][0].atan2(base.rotation[0][0]).to_degrees();
    let rel = base_yaw + angle_deg - camera.azimuth_deg;
    // Compare modulo 360 against the interval.
    let shifted = lo + (rel - lo).rem_euclid(360.0);
    (shifted > hi).then(|| {
        format!(
            "rotation angle {angle_deg} deg is outside the trained range [{lo}, {hi}] deg of object-to-camera yaw; \
             samples may degrade"
        )
    })
}

/// One row per `rows` entry, one column per angle (object yaw about the up axis).
pub fn render_rotation_grid(gen: &Generator, rows: &[RowSpec], angles: &[f64]) -> Result<Grid> {
    if rows.is_empty() || angles.is_empty() {
        bail_arg!("rotation grid needs rows and angles");
    }
    let base = canonical_pose(gen)?;
    let camera = canonical_camera(gen);
    let mut warnings: Vec<String> = angles.iter().filter_map(|&a| rotation_warning(gen, &base, &camera, a)).collect();
    warnings.dedup();
    let (mut metas, mut scenes) = (Vec::new(), Vec::new());
    for (r, row) in rows.iter().enumerate() {
        let (obj, _) = seed_latents(gen, row.seed)?;
        for (c, &a) in angles.iter().enumerate() {
            let pose = base.rotated_about_up(a);
            scenes.push(tile_scene(gen, row.seed, obj.clone(), &row.condition, std::slice::from_ref(&pose))?);
            metas.push(tile_meta(r, c, row.seed, &row.condition, vec![pose], camera));
        }
    }
    render_tiles(gen, metas, scenes, "rotation", rows.len(), angles.len(), rows.iter().map(|r| r.seed).collect(), warnings)
}

fn tile_meta(row: usize, col: usize, seed: u64, condition: &ConditionVector, object_poses: Vec<ObjectPose>, camera: CameraPose) -> TileMeta {
    TileMeta {
        row,
        col,
        seed,
        condition: condition.clone(),
        object_poses,
        camera,
        latent_alpha: None,
        latent_seed_b: None,
    }
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
}

/// Varies one attribute of `base` across columns; latents fixed per row.
pub fn render_condition_sweep(gen: &Generator, seeds: &[u64], base: &ConditionVector, attribute: usize, values: &[f64]) -> Result<Grid> {
    if values.len() < 2 {
        bail_arg!("a condition sweep needs at least two values");
    }
    if attribute >= base.len() {
        bail_arg!("attribute index {attribute} out of range for {} attributes", base.len());
    }
    if seeds.is_empty() {
        bail_arg!("sweep needs at least one seed");
    }
    let pose = canonical_pose(gen)?;
    let camera = canonical_camera(gen);
    let conditions: Vec<ConditionVector> = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.0[attribute] = v;
            c
        })
        .collect();
    let mut warnings: Vec<String> = conditions.iter().filter_map(|c| c.extrapolation_warning()).collect();
    warnings.dedup();
    let (mut metas, mut scenes) = (Vec::new(), Vec::new());
    for (r, &seed) in seeds.iter().enumerate() {
        let (obj, _) = seed_latents(gen, seed)?;
        for (c, cond) in conditions.iter().enumerate() {
            scenes.push(tile_scene(gen, seed, obj.clone(), cond, std::slice::from_ref(&pose))?);
            metas.push(tile_meta(r, c, seed, cond, vec![pose.clone()], camera));
        }
    }
    render_tiles(gen, metas, scenes, "sweep", seeds.len(), values.len(), seeds.to_vec(), warnings)
}

/// Condition `(1 - alpha) onehot(a) + alpha onehot(b)` across columns.
pub fn render_class_interpolation(gen: &Generator, seeds: &[u64], class_a: usize, class_b: usize, steps: usize) -> Result<Grid> {
    let m_c = gen.config.condition_dim;
    if class_a >= m_c || class_b >= m_c {
        bail_arg!("class index out of range for {m_c} classes");
    }
    if steps == 0 || seeds.is_empty() {
        bail_arg!("class interpolation needs seeds and at least one step");
    }
    let a = ConditionVector::one_hot(m_c, class_a)?;
    let b = ConditionVector::one_hot(m_c, class_b)?;
    let pose = canonical_pose(gen)?;
    let camera = canonical_camera(gen);
    let (mut metas, mut scenes) = (Vec::new(), Vec::new());
    for (r, &seed) in seeds.iter().enumerate() {
        let (obj, _) = seed_latents(gen, seed)?;
        for (c, alpha) in linspace(0.0, 1.0, steps).into_iter().enumerate() {
            let cond = ConditionVector::lerp(&a, &b, alpha)?;
            scenes.push(tile_scene(gen, seed, obj.clone(), &cond, std::slice::from_ref(&pose))?);
            metas.push(tile_meta(r, c, seed, &cond, vec![pose.clone()], camera));
        }
    }
    render_tiles(gen, metas, scenes, "class", seeds.len(), steps, seeds.to_vec(), Vec::new())
}

/// Interpolates the object latents of `seed_a` towards those of `seed_b`
/// (the background of `seed_a` is kept).
pub fn render_latent_interpolation(gen: &Generator, condition: &ConditionVector, seed_a: u64, seed_b: u64, steps: usize) -> Result<Grid> {
    if steps == 0 {
        bail_arg!("latent interpolation needs at least one step");
    }
    let (za, _) = seed_latents(gen, seed_a)?;
    let (zb, _) = seed_latents(gen, seed_b)?;
    let pose = canonical_pose(gen)?;
    let camera = canonical_camera(gen);
    let (mut metas, mut scenes) = (Vec::new(), Vec::new());
    for (c, alpha) in linspace(0.0, 1.0, steps).into_iter().enumerate() {
        let z = LatentCodes::lerp(&za, &zb, alpha)?;
        scenes.push(tile_scene(gen, seed_a, z, condition, std::slice::from_ref(&pose))?);
        let mut meta = tile_meta(0, c, seed_a, condition, vec![pose.clone()], camera);
        meta.latent_alpha = Some(alpha);
        meta.latent_seed_b = Some(seed_b);
        metas.push(meta);
    }
    render_tiles(gen, metas, scenes, "latent", 1, steps, vec![seed_a, seed_b], Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseControl {
    /// Translation along the camera's horizontal axis.
    Horizontal,
    /// Translation along the camera's (horizontal) viewing direction.
    Depth,
    /// Multiplies the object scale.
    Scale,
    /// Column `k` shows objects at horizontal offsets `values[0..=k]`.
    AddObject,
}

/// Camera-relative horizontal and depth axes in the ground plane.
pub fn camera_axes(camera: &CameraPose) -> ([f64; 3], [f64; 3]) {
    let (_, _, forward) = camera.frame();
    let flat = normalize([forward[0], forward[1], 0.0]);
    (normalize(cross(flat, [0.0, 0.0, 1.0])), flat)
}

fn shifted(pose: &ObjectPose, axis: [f64; 3], amount: f64) -> ObjectPose {
    let mut p = pose.clone();
    for k in 0..3 {
        p.translation[k] += axis[k] * amount;
    }
    p
}

pub fn render_pose_controls(gen: &Generator, rows: &[RowSpec], control: PoseControl, values: &[f64]) -> Result<Grid> {
    if rows.is_empty() || values.is_empty() {
        bail_arg!("pose controls need rows and values");
    }
    if control == PoseControl::Scale && values.iter().any(|&v| !(v > 0.0)) {
        bail_arg!("scale factors must be positive");
    }
    let base = canonical_pose(gen)?;
    let camera = canonical_camera(gen);
    let (horizontal, depth) = camera_axes(&camera);
    let (mut metas, mut scenes) = (Vec::new(), Vec::new());
    for (r, row) in rows.iter().enumerate() {
        let (obj, _) = seed_latents(gen, row.seed)?;
        for (c, &v) in values.iter().enumerate() {
            let poses = match control {
                PoseControl::Horizontal => vec![shifted(&base, horizontal, v)],
                PoseControl::Depth => vec![shifted(&base, depth, v)],
                PoseControl::Scale => {
                    let mut p = base.clone();
                    p.scale = p.scale.map(|s| s * v);
                    vec![p]
                }
                PoseControl::AddObject => values[..=c].iter().map(|&o| shifted(&base, horizontal, o)).collect(),
            };
            scenes.push(tile_scene(gen, row.seed, obj.clone(), &row.condition, &poses)?);
            metas.push(tile_meta(r, c, row.seed, &row.condition, poses, camera));
        }
    }
    let kind = match control {
        PoseControl::Horizontal => "horizontal",
        PoseControl::Depth => "depth",
        PoseControl::Scale => "scale",
        PoseControl::AddObject => "add-object",
    };
    render_tiles(gen, metas, scenes, kind, rows.len(), values.len(), rows.iter().map(|r| r.seed).collect(), Vec::new())
}

/// Re-renders a tile from its sidecar entry.
pub fn regenerate_tile(gen: &Generator, meta: &TileMeta) -> Result<RenderedImage> {
    let object = match (meta.latent_alpha, meta.latent_seed_b) {
        (Some(alpha), Some(seed_b)) => LatentCodes::lerp(&seed_latents(gen, meta.seed)?.0, &seed_latents(gen, seed_b)?.0, alpha)?,
        _ => seed_latents(gen, meta.seed)?.0,
    };
    let scene = tile_scene(gen, meta.seed, object, &meta.condition, &meta.object_poses)?;
    gen.render_image(&scene, &meta.camera)
}

/// Unwraps a hue sequence so consecutive entries differ by at most 180 degrees.
pub fn unwrap_hues(hues: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(hues.len());
    for &h in hues {
        match out.last() {
            Some(&prev) => out.push(prev + hue_difference(prev, h)),
            None => out.push(h),
        }
    }
    out
}

/// A hue sequence drifts monotonically if, after unwrapping, every step moves
/// in one direction (allowing `slack_deg` of jitter against it) and the total
/// drift is at least `min_total_deg`.
pub fn is_monotone_drift(hues: &[f64], slack_deg: f64, min_total_deg: f64) -> bool {
    if hues.len() < 2 {
        return false;
    }
    let u = unwrap_hues(hues);
    let total = u[u.len() - 1] - u[0];
    if total.abs() < min_total_deg {
        return false;
    }
    let sign = total.signum();
    u.windows(2).all(|w| sign * (w[1] - w[0]) >= -slack_deg)
}

/// Fraction of sweep rows whose foreground hue drifts monotonically.
pub fn sweep_monotone_fraction(grid: &Grid, slack_deg: f64, min_total_deg: f64) -> f64 {
    let t = ForegroundThreshold::default();
    let ok = grid
        .tiles
        .iter()
        .filter(|row| {
            let hues: Option<Vec<f64>> = row.iter().map(|im| mean_foreground_hue(im, t)).collect();
            hues.map(|h| is_monotone_drift(&h, slack_deg, min_total_deg)).unwrap_or(false)
        })
        .count();
    ok as f64 / grid.tiles.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    /// Oracle: trace of (C1 C2)^{1/2} from the (real, non-negative)
    /// eigenvalues of the non-symmetric product.
    fn oracle(mu1: &DVector<f64>, c1: &DMatrix<f64>, mu2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
        let eig: Vec<Complex<f64>> = (c1 * c2).complex_eigenvalues().iter().copied().collect();
        let tr: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
        (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * tr
    }

    #[test]
    fn matches_product_eigen_oracle() {
        for seed in 0..20 {
            let (c1, c2) = (spd(4, seed), spd(4, seed + 100));
            let mu1 = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.0]);
            let mu2 = DVector::from_vec(vec![0.0, -0.2, 0.1, 0.5]);
            let got = frechet_distance(&mu1, &c1, &mu2, &c2).unwrap();
            let want = oracle(&mu1, &c1, &mu2, &c2);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            let swapped = frechet_distance(&mu2, &c2, &mu1, &c1).unwrap();
            assert!((got - swapped).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let c = DMatrix::identity(3, 3);
        assert!(frechet_distance(&DVector::zeros(3), &c, &DVector::zeros(2), &c).is_err());
    }

    #[test]
    fn shrinkage_for_few_samples() {
        let m = GaussianMoments::fit(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((m.cov[(2, 2)] - (4.5 + SHRINKAGE)).abs() < 1e-12);
    }

    #[test]
    fn fid_is_order_invariant_and_noise_increases_it() {
        let emb = RandomConvEmbedding::new(RandomConvEmbedding::DEFAULT_SEED).unwrap();
        let imgs: Vec<RenderedImage> = (0..40)
            .map(|i| RenderedImage::new(8, 8, (0..192).map(|k| ((k * 7 + i * 13) % 17) as f64 / 16.0).collect()).unwrap())
            .collect();
        let mut rev = imgs.clone();
        rev.reverse();
        let a = compute_fid(&imgs, &imgs, &emb).unwrap().fid;
        let b = compute_fid(&imgs, &rev, &emb).unwrap().fid;
        assert!(a < 1e-6 && b < 1e-6);
        let noisy: Vec<RenderedImage> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| {
                let data = im.data.iter().enumerate().map(|(k, v)| (v + 0.5 * (((k * 31 + i * 7) % 11) as f64 / 10.0 - 0.5)).clamp(0.0, 1.0)).collect();
                RenderedImage::new(8, 8, data).unwrap()
            })
            .collect();
        assert!(compute_fid(&imgs, &noisy, &emb).unwrap().fid > a);
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = RandomConvEmbedding::new(3).unwrap();
        let path = dir.path().join("emb.safetensors");
        emb.save(&path).unwrap();
        let back = RandomConvEmbedding::from_file(&path).unwrap();
        let img = vec![RenderedImage::new(4, 4, vec![0.3; 48]).unwrap()];
        assert_eq!(emb.embed(&img).unwrap(), back.embed(&img).unwrap());
    }

    #[test]
    fn monotone_drift_rules() {
        assert!(is_monotone_drift(&[240.0, 260.0, 300.0, 350.0, 10.0], 1.0, 10.0));
        assert!(is_monotone_drift(&[10.0, 355.0, 300.0], 1.0, 10.0));
        assert!(!is_monotone_drift(&[240.0, 280.0, 250.0], 1.0, 5.0));
        assert!(is_monotone_drift(&[240.0, 260.0, 259.5, 280.0], 1.0, 10.0));
        assert!(!is_monotone_drift(&[240.0, 241.0], 1.0, 10.0));
        assert_eq!(linspace(0.0, 3.0, 7), vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }
}
