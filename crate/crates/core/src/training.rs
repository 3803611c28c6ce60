//! Adversarial objectives, the alternating training loop and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{rows_tensor, ConditionVector};
use crate::data::ImageSet;
use crate::discriminator::{Critic, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::nn::optim::RmsPropConfig;
use crate::nn::{scalar, softplus, RmsProp};
use crate::rendering::{Generator, GeneratorConfig, RenderedImage};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Floating-point precision used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub r1_lambda: f64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Attribute names of the condition vector, in order (filled from the
    /// dataset when empty).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0) || !(self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.r1_lambda >= 0.0) {
            return Err(Error::Config("r1_lambda must be non-negative".into()));
        }
        if !(self.rmsprop_alpha > 0.0 && self.rmsprop_alpha < 1.0) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config("rmsprop alpha must lie in (0, 1) and eps be positive".into()));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.generator.validate().map_err(wrap)?;
        self.discriminator.validate().map_err(wrap)?;
        if self.discriminator.resolution != self.generator.output_resolution() {
            return Err(Error::Config(format!(
                "discriminator resolution {} != generator output {}",
                self.discriminator.resolution,
                self.generator.output_resolution()
            )));
        }
        if self.discriminator.condition_dim != self.generator.condition_dim {
            return Err(Error::Config("generator and discriminator condition dims differ".into()));
        }
        if !self.attributes.is_empty() && self.attributes.len() != self.generator.condition_dim {
            return Err(Error::Config(format!(
                "{} attribute names for condition dimension {}",
                self.attributes.len(),
                self.generator.condition_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    fn optimizer(&self, lr: f64) -> RmsPropConfig {
        RmsPropConfig {
            lr,
            alpha: self.rmsprop_alpha,
            eps: self.rmsprop_eps,
        }
    }
}

/// Desk-scale configuration used by the smoke test: 32x32 output from an
/// 8x8 feature image, two one-hot classes.
pub fn smoke_config() -> TrainingConfig {
    use crate::fields::FieldConfig;
    use crate::rendering::{CameraRanges, Interval, NeuralRendererConfig, ObjectPrior};
    let radius = 2.7;
    let field = |point_octaves, blocks, skip_block, input_scale| FieldConfig {
        point_octaves,
        direction_octaves: 2,
        shape_dim: 16,
        appearance_dim: 16,
        hidden_dim: 32,
        blocks,
        skip_block,
        feature_dim: 32,
        input_scale,
    };
    TrainingConfig {
        seed: 0,
        iterations: 2500,
        batch_size: 16,
        lr_generator: 3e-4,
        lr_discriminator: 1e-4,
        rmsprop_alpha: 0.99,
        rmsprop_eps: 1e-8,
        r1_lambda: 10.0,
        checkpoint_every: 500,
        precision: Precision::F32,
        attributes: vec!["hue".into(), "size".into()],
        generator: GeneratorConfig {
            condition_dim: 2,
            object_field: field(4, 8, Some(4), 0.5),
            background_field: field(2, 4, None, 0.2),
            renderer: NeuralRendererConfig {
                feature_dim: 32,
                feature_resolution: 8,
                output_resolution: 32,
                min_channels: 16,
            },
            condition_background: false,
            samples_per_ray: 10,
            near: radius - 3f64.sqrt(),
            far: radius + 3f64.sqrt(),
            fov_deg: 40.0,
            camera: CameraRanges {
                azimuth_deg: Interval::new(-20.0, 20.0),
                elevation_deg: Interval::new(0.0, 10.0),
                radius: Interval::fixed(radius),
            },
            object_prior: ObjectPrior {
                scale: Interval::new(0.5, 0.6),
                translation: [Interval::new(-0.12, 0.12), Interval::new(-0.12, 0.12), Interval::new(-0.1, 0.1)],
                yaw_deg: Interval::fixed(0.0),
            },
        },
        discriminator: DiscriminatorConfig {
            condition_dim: 2,
            resolution: 32,
            base_channels: 16,
            max_channels: 64,
        },
    }
}

/// Independent stream seed for `(seed, iteration, tag)`.
pub fn derive_seed(seed: u64, iteration: u64, tag: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(iteration ^ mix(tag)))
}

const TAG_GENERATOR_INIT: u64 = 1;
const TAG_DISCRIMINATOR_INIT: u64 = 2;
const TAG_FAKES: u64 = 3;
const TAG_BATCHES: u64 = 4;

/// `lambda * mean_b ||d logit_b / d x_b||^2` over real images.
pub fn r1_penalty<C: Critic + ?Sized>(critic: &C, real: &Tensor, conditions: &Tensor, lambda: f64) -> Result<Tensor> {
    let g = critic.input_gradient(real, conditions)?;
    let b = g.dim(0)?;
    let per_sample = g.sqr()?.reshape((b, ()))?.sum(1)?;
    Ok((per_sample.mean(0)? * lambda)?)
}

/// Discriminator objective and its logged parts.
#[derive(Debug, Clone)]
pub struct DiscriminatorLoss {
    pub total: Tensor,
    pub adversarial: f64,
    pub r1: f64,
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
}

fn check_pair(images: &Tensor, conditions: &Tensor) -> Result<()> {
    let b = images.dims4()?.0;
    if conditions.dims2()?.0 != b {
        return Err(Error::InvalidArgument(format!(
            "{} conditions for a batch of {b} images",
            conditions.dims2()?.0
        )));
    }
    Ok(())
}

/// `mean softplus(-D(real)) + mean softplus(D(fake)) + r1_penalty(real)`.
pub fn discriminator_loss<C: Critic + ?Sized>(
    critic: &C,
    real: &Tensor,
    real_conditions: &Tensor,
    fake: &Tensor,
    fake_conditions: &Tensor,
    lambda: f64,
) -> Result<DiscriminatorLoss> {
    check_pair(real, real_conditions)?;
    check_pair(fake, fake_conditions)?;
    if real.dims()[1..] != fake.dims()[1..] {
        return Err(Error::InvalidArgument(format!(
            "real {:?} and fake {:?} images differ in shape",
            real.dims(),
            fake.dims()
        )));
    }
    let real_logits = critic.logits(real, real_conditions)?;
    let fake_logits = critic.logits(fake, fake_conditions)?;
    let adversarial = (softplus(&real_logits.neg()?)?.mean_all()? + softplus(&fake_logits)?.mean_all()?)?;
    let (total, r1) = if lambda > 0.0 {
        let r1 = r1_penalty(critic, real, real_conditions, lambda)?;
        ((&adversarial + &r1)?, scalar(&r1)?)
    } else {
        (adversarial.clone(), 0.0)
    };
    Ok(DiscriminatorLoss {
        adversarial: scalar(&adversarial)?,
        r1,
        real_logit_mean: scalar(&real_logits.mean_all()?)?,
        fake_logit_mean: scalar(&fake_logits.mean_all()?)?,
        total,
    })
}

/// Non-saturating generator objective `mean softplus(-D(fake))`.
pub fn generator_loss<C: Critic + ?Sized>(critic: &C, fake: &Tensor, fake_conditions: &Tensor) -> Result<Tensor> {
    check_pair(fake, fake_conditions)?;
    softplus(&critic.logits(fake, fake_conditions)?.neg()?)?.mean_all().map_err(Error::from)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: f64,
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
    pub wall_time_s: f64,
}

/// Checkpoint metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Number of completed iterations.
    pub iteration: u64,
    pub config: TrainingConfig,
    pub config_hash: String,
    /// Every random stream is derived from `(rng_seed, iteration, tag)`, so
    /// this pair is the full RNG state.
    pub rng_seed: u64,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_generator: RmsProp,
    opt_discriminator: RmsProp,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let generator = Generator::new(
            config.generator.clone(),
            derive_seed(config.seed, 0, TAG_GENERATOR_INIT),
            dtype,
        )?;
        let discriminator = Discriminator::new(
            config.discriminator.clone(),
            derive_seed(config.seed, 0, TAG_DISCRIMINATOR_INIT),
            dtype,
        )?;
        Ok(Self {
            opt_generator: RmsProp::new(config.optimizer(config.lr_generator))?,
            opt_discriminator: RmsProp::new(config.optimizer(config.lr_discriminator))?,
            config,
            generator,
            discriminator,
            iteration: 0,
        })
    }

    fn conditions_tensor(&self, conditions: &[ConditionVector]) -> Result<Tensor> {
        rows_tensor(&conditions.iter().map(|c| c.values()).collect::<Vec<_>>(), self.generator.dtype())
    }

    /// One discriminator update followed by one generator update.
    ///
    /// Fakes are rendered once per iteration: the discriminator sees them
    /// detached, the generator update backpropagates through the same graph
    /// (generator parameters are unchanged in between).
    pub fn step(
        &mut self,
        real: &[RenderedImage],
        real_conditions: &[ConditionVector],
        fake_conditions: &[ConditionVector],
    ) -> Result<StepMetrics> {
        let started = Instant::now();
        let it = self.iteration;
        let dtype = self.generator.dtype();
        if real.len() != real_conditions.len() || real.is_empty() || fake_conditions.is_empty() {
            return Err(Error::InvalidArgument("empty or mismatched training batch".into()));
        }
        let real_t = RenderedImage::stack(real, dtype)?;
        let real_c = self.conditions_tensor(real_conditions)?;
        let fake_c = self.conditions_tensor(fake_conditions)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, it, TAG_FAKES));
        let mut scenes = Vec::with_capacity(fake_conditions.len());
        let mut cameras = Vec::with_capacity(fake_conditions.len());
        for c in fake_conditions {
            let s = self.generator.sample_scene(c, &mut rng)?;
            scenes.push(s.scene);
            cameras.push(s.camera);
        }
        let fake = self.generator.render(&scenes, &cameras, Some(&mut rng))?;

        let d = discriminator_loss(
            &self.discriminator,
            &real_t,
            &real_c,
            &fake.detach(),
            &fake_c,
            self.config.r1_lambda,
        )?;
        let loss_d = scalar(&d.total)?;
        self.ensure_finite(loss_d, "discriminator loss")?;
        let grads = d.total.backward()?;
        self.opt_discriminator.step(&self.discriminator.params, &grads)?;

        let g = generator_loss(&self.discriminator, &fake, &fake_c)?;
        let loss_g = scalar(&g)?;
        self.ensure_finite(loss_g, "generator loss")?;
        let grads = g.backward()?;
        self.opt_generator.step(&self.generator.params, &grads)?;

        self.iteration += 1;
        Ok(StepMetrics {
            iteration: self.iteration,
            loss_d,
            loss_g,
            r1: d.r1,
            real_logit_mean: d.real_logit_mean,
            fake_logit_mean: d.fake_logit_mean,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    fn ensure_finite(&self, value: f64, what: &str) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        Err(Error::Numerical {
            iteration: self.iteration,
            message: format!("{what} is {value}"),
            last_checkpoint: None,
        })
    }

    /// Real batch and fake conditions for the current iteration; a pure
    /// function of `(seed, iteration)`.
    pub fn batch_for_iteration<'a>(&self, data: &'a ImageSet) -> Result<(Vec<&'a RenderedImage>, Vec<ConditionVector>, Vec<ConditionVector>)> {
        let indices = data.batch_indices(self.config.batch_size, derive_seed(self.config.seed, 0, TAG_BATCHES), self.iteration)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.iteration, TAG_BATCHES));
        let images = indices.iter().map(|&i| &data.images[i]).collect();
        let conditions = indices.iter().map(|&i| data.conditions[i].clone()).collect();
        let fakes = (0..self.config.batch_size)
            .map(|_| data.conditions[rng.random_range(0..data.len())].clone())
            .collect();
        Ok((images, conditions, fakes))
    }

    /// Runs until `config.iterations` iterations are complete. With an output
    /// directory, appends to `metrics.jsonl` and writes checkpoints there.
    pub fn train(&mut self, data: &ImageSet, out_dir: Option<&Path>) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        if data.condition_dim() != self.config.generator.condition_dim {
            return Err(Error::Data(format!(
                "dataset has {} attributes, model expects {}",
                data.condition_dim(),
                self.config.generator.condition_dim
            )));
        }
        if !self.config.attributes.is_empty() && self.config.attributes != data.attributes {
            log::warn!(
                "dataset attributes {:?} differ from configured {:?}",
                data.attributes,
                self.config.attributes
            );
        }
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some((
                    OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?,
                    path,
                ))
            }
            None => None,
        };
        let mut last_checkpoint = None;
        if let Some(dir) = out_dir {
            if self.iteration == 0 {
                last_checkpoint = Some(self.save_numbered(dir)?);
            }
        }
        let mut history = Vec::new();
        while self.iteration < self.config.iterations {
            let (images, conditions, fakes) = self.batch_for_iteration(data)?;
            let images: Vec<RenderedImage> = images.into_iter().cloned().collect();
            let metrics = match self.step(&images, &conditions, &fakes) {
                Ok(m) => m,
                Err(Error::Numerical { iteration, message, .. }) => {
                    return Err(Error::Numerical {
                        iteration,
                        message,
                        last_checkpoint,
                    })
                }
                Err(e) => return Err(e),
            };
            if metrics.iteration % 50 == 0 || metrics.iteration == 1 {
                log::info!(
                    "iter {} loss_d {:.4} loss_g {:.4} r1 {:.4} ({:.2}s)",
                    metrics.iteration,
                    metrics.loss_d,
                    metrics.loss_g,
                    metrics.r1,
                    metrics.wall_time_s
                );
            }
            if let Some((file, path)) = log.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&metrics)?).map_err(|e| Error::io(&*path, e))?;
            }
            history.push(metrics);
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.iteration % every == 0) || self.iteration == self.config.iterations {
                    last_checkpoint = Some(self.save_numbered(dir)?);
                }
            }
        }
        Ok(history)
    }

    fn save_numbered(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint_{:08}.safetensors", self.iteration));
        self.save(&path)?;
        self.save(&dir.join("latest.safetensors"))?;
        Ok(path)
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            rng_seed: self.config.seed,
        })
    }

    /// Writes every parameter, optimizer state and metadata to one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        tensors.extend(self.generator.params.snapshot());
        tensors.extend(self.discriminator.params.snapshot());
        for (k, v) in self.opt_generator.state() {
            tensors.insert(format!("opt.{k}"), v.clone());
        }
        for (k, v) in self.opt_discriminator.state() {
            tensors.insert(format!("opt.{k}"), v.clone());
        }
        let meta = HashMap::from([("condnerf".to_string(), serde_json::to_string(&self.meta()?)?)]);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let bytes = safetensors::serialize(tensors.iter(), Some(meta))
            .map_err(|e| Error::Checkpoint(format!("cannot serialize checkpoint: {e}")))?;
        let tmp = path.with_extension("tmp");
        File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(path)?;
        let mut trainer = Self::new(meta.config.clone())?;
        let pick = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        trainer.generator.params.load(&pick("gen."))?;
        trainer.discriminator.params.load(&pick("disc."))?;
        let strip = |prefix: &str| -> BTreeMap<String, Tensor> {
            pick(prefix)
                .into_iter()
                .map(|(k, v)| (k.trim_start_matches("opt.").to_string(), v))
                .collect()
        };
        trainer.opt_generator.load_state(strip("opt.gen."));
        trainer.opt_discriminator.load_state(strip("opt.disc."));
        trainer.iteration = meta.iteration;
        Ok(trainer)
    }
}

/// Reads and validates a checkpoint file without building a model.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: String| Error::Checkpoint(format!("{}: {what}", path.display()));
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("condnerf"))
        .ok_or_else(|| corrupt("missing metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(corrupt(format!("unsupported schema version {}", meta.schema_version)));
    }
    if meta.config.hash()? != meta.config_hash {
        return Err(corrupt("config hash mismatch".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, &Device::Cpu).map_err(|e| corrupt(e.to_string()))?;
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}
