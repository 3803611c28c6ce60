//! Scene graphs of objects plus a background, and the density-weighted
//! composition of their feature fields.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    project_condition, sample_latents, ConditionEncoder, ConditionVector, ConditionalEncodings, LatentCodes,
};
use crate::error::{bail_arg, Result};
use crate::fields::{encode_direction, encode_point, FieldDecoder, FieldSample, ObjectPose};

/// Total density below which the composed feature is defined as zero.
pub const DENSITY_EPS: f64 = 1e-8;

/// Object fields have support only inside this axis-aligned box (object space).
pub const OBJECT_BOX_HALF_EXTENT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSample {
    pub sigma: f64,
    pub feature: Vec<f64>,
}

/// Correctly rounded floating-point sum (Shewchuk partials), so the result
/// does not depend on the order of the terms.
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials (smallest first) to nearest, with the half-way correction.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Density-weighted mean composition:
/// `sigma = sum_i sigma_i`, `f = sum_i sigma_i f_i / sigma`.
pub fn compose(samples: &[FieldSample]) -> Result<ComposedSample> {
    let Some(first) = samples.first() else {
        bail_arg!("compose needs at least one entity sample");
    };
    let m_f = first.feature.len();
    for s in samples {
        if s.feature.len() != m_f {
            bail_arg!("feature sizes differ ({} vs {m_f})", s.feature.len());
        }
        if !(s.sigma >= 0.0) || !s.sigma.is_finite() {
            bail_arg!("densities must be finite and nonnegative, got {}", s.sigma);
        }
    }
    let sigma = exact_sum(samples.iter().map(|s| s.sigma));
    if sigma <= DENSITY_EPS {
        return Ok(ComposedSample {
            sigma,
            feature: vec![0.0; m_f],
        });
    }
    let feature = (0..m_f)
        .map(|k| {
            let num = exact_sum(samples.iter().map(|s| s.sigma * s.feature[k]));
            let v = num / sigma;
            // Mathematically a convex combination; clamp away rounding overshoot.
            let (lo, hi) = samples
                .iter()
                .filter(|s| s.sigma > 0.0)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                    (lo.min(s.feature[k]), hi.max(s.feature[k]))
                });
            v.clamp(lo, hi)
        })
        .collect();
    Ok(ComposedSample { sigma, feature })
}

/// One object or the background.
#[derive(Debug, Clone)]
pub struct Entity {
    pub decoder: Arc<FieldDecoder>,
    pub latents: LatentCodes,
    pub condition: ConditionVector,
    pub pose: ObjectPose,
    pub is_background: bool,
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub entities: Vec<Entity>,
}

impl SceneGraph {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let scene = Self { entities };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            bail_arg!("a scene needs at least one entity");
        }
        let backgrounds = self.entities.iter().filter(|e| e.is_background).count();
        if backgrounds != 1 {
            bail_arg!("a scene needs exactly one background entity, found {backgrounds}");
        }
        for e in &self.entities {
            e.pose.validate()?;
            if e.is_background && !e.pose.is_identity() {
                bail_arg!("the background pose must be the identity");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn object_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entities.iter().enumerate().filter(|(_, e)| !e.is_background).map(|(i, _)| i)
    }

    /// Returns a copy with every object's pose transformed by `f`.
    pub fn map_object_poses(&self, mut f: impl FnMut(usize, &ObjectPose) -> ObjectPose) -> Result<Self> {
        let mut out = self.clone();
        for (i, e) in out.entities.iter_mut().enumerate() {
            if !e.is_background {
                e.pose = f(i, &e.pose);
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Conditional encodings of one entity. With `condition_background == false`
/// the background uses its raw latents.
pub fn entity_encodings(
    entity: &Entity,
    encoder: &ConditionEncoder,
    condition_background: bool,
) -> Result<ConditionalEncodings> {
    if entity.is_background && !condition_background {
        return Ok(ConditionalEncodings {
            shape: entity.latents.shape.clone(),
            appearance: entity.latents.appearance.clone(),
        });
    }
    project_condition(&entity.condition, &entity.latents, encoder)
}

/// Whether an object-space point lies inside the canonical object box.
pub fn inside_object_box(p: [f64; 3]) -> bool {
    p.iter().all(|v| v.abs() <= OBJECT_BOX_HALF_EXTENT)
}

/// Evaluates every entity at a scene point and composes the results.
pub fn eval_scene(
    scene: &SceneGraph,
    encoder: &ConditionEncoder,
    condition_background: bool,
    x_scene: [f64; 3],
    d: [f64; 3],
) -> Result<ComposedSample> {
    scene.validate()?;
    let mut samples = Vec::with_capacity(scene.len());
    for e in &scene.entities {
        let cfg = &e.decoder.config;
        let x_obj = e.pose.to_object_space(x_scene);
        let d_obj = e.pose.direction_to_object_space(d);
        if !e.is_background && !inside_object_box(x_obj) {
            samples.push(FieldSample {
                sigma: 0.0,
                feature: vec![0.0; cfg.feature_dim],
            });
            continue;
        }
        let scaled = x_obj.map(|v| v * cfg.input_scale);
        let enc = entity_encodings(e, encoder, condition_background)?;
        let mut s = e.decoder.eval_samples(
            &[encode_point(scaled, cfg.point_octaves)?],
            &[encode_direction(d_obj, cfg.direction_octaves)?],
            &enc,
        )?;
        samples.push(s.remove(0));
    }
    compose(&samples)
}

/// Adds a copy of an object that shares the source decoder's parameters.
pub fn replicate_object(
    scene: &SceneGraph,
    source_index: usize,
    new_pose: ObjectPose,
    new_condition: ConditionVector,
    new_latents: LatentCodes,
) -> Result<SceneGraph> {
    let Some(src) = scene.entities.get(source_index) else {
        bail_arg!("entity index {source_index} out of range ({} entities)", scene.len());
    };
    if src.is_background {
        bail_arg!("the background cannot be replicated");
    }
    if new_condition.len() != src.condition.len() {
        bail_arg!("replica condition length {} != {}", new_condition.len(), src.condition.len());
    }
    let mut out = scene.clone();
    out.entities.push(Entity {
        decoder: Arc::clone(&src.decoder),
        latents: new_latents,
        condition: new_condition,
        pose: new_pose,
        is_background: false,
    });
    out.validate()?;
    Ok(out)
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub entities: Vec<EntityDescription>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Object,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDescription {
    #[serde(default = "unit_scale")]
    pub scale: [f64; 3],
    #[serde(default)]
    pub translation: [f64; 3],
    /// Euler angles about x, y, z in degrees.
    #[serde(default)]
    pub rotation_deg: [f64; 3],
}

fn unit_scale() -> [f64; 3] {
    [1.0; 3]
}

impl Default for PoseDescription {
    fn default() -> Self {
        Self {
            scale: unit_scale(),
            translation: [0.0; 3],
            rotation_deg: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDescription {
    pub kind: EntityKind,
    #[serde(default)]
    pub pose: PoseDescription,
    /// Attribute name -> value; unspecified attributes are zero.
    #[serde(default)]
    pub condition: BTreeMap<String, f64>,
    pub latent_seed: u64,
}

impl SceneDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build(
        &self,
        object: &Arc<FieldDecoder>,
        background: &Arc<FieldDecoder>,
        attributes: &[String],
    ) -> Result<SceneGraph> {
        let mut entities = Vec::with_capacity(self.entities.len());
        for desc in &self.entities {
            let mut c = vec![0.0; attributes.len()];
            for (name, value) in &desc.condition {
                let Some(i) = attributes.iter().position(|a| a == name) else {
                    bail_arg!("unknown condition attribute {name:?}; known: {}", attributes.join(", "));
                };
                c[i] = *value;
            }
            let is_background = desc.kind == EntityKind::Background;
            let decoder = if is_background { background } else { object };
            let cfg = &decoder.config;
            let latents = sample_latents(1, cfg.shape_dim, cfg.appearance_dim, desc.latent_seed)?.remove(0);
            let pose = if is_background {
                ObjectPose::identity()
            } else {
                ObjectPose::from_euler_degrees(desc.pose.scale, desc.pose.translation, desc.pose.rotation_deg)?
            };
            entities.push(Entity {
                decoder: Arc::clone(decoder),
                latents,
                condition: ConditionVector::new(c),
                pose,
                is_background,
            });
        }
        SceneGraph::new(entities)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(sigma: f64, feature: &[f64]) -> FieldSample {
        FieldSample {
            sigma,
            feature: feature.to_vec(),
        }
    }

    #[test]
    fn single_entity_is_identity() {
        let s = fs(0.7, &[0.1, -2.0, 3.5]);
        let c = compose(&[s.clone()]).unwrap();
        assert_eq!(c.sigma, s.sigma);
        assert_eq!(c.feature, s.feature);
    }

    #[test]
    fn equal_density_averages() {
        let c = compose(&[fs(2.0, &[1.0, 4.0]), fs(2.0, &[3.0, 0.0])]).unwrap();
        assert_eq!(c.sigma, 4.0);
        assert_eq!(c.feature, vec![2.0, 2.0]);
    }

    #[test]
    fn zero_density_guard() {
        let c = compose(&[fs(0.0, &[1.0]), fs(0.0, &[5.0])]).unwrap();
        assert_eq!(c.feature, vec![0.0]);
        let c = compose(&[fs(1e-9, &[1.0])]).unwrap();
        assert_eq!(c.feature, vec![0.0]);
    }

    #[test]
    fn errors() {
        assert!(compose(&[]).is_err());
        assert!(compose(&[fs(1.0, &[1.0]), fs(1.0, &[1.0, 2.0])]).is_err());
        assert!(compose(&[fs(-1.0, &[1.0])]).is_err());
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let v = [1e16, 1.0, -1e16, 3.5e-8, 0.1, 0.2, 0.3];
        let a = exact_sum(v);
        let mut r = v;
        r.reverse();
        assert_eq!(a.to_bits(), exact_sum(r).to_bits());
        assert_eq!(exact_sum([0.1, 0.2, 0.3]), 0.6);
        assert_eq!(exact_sum([]), 0.0);
    }

    #[test]
    fn scene_description_round_trip() {
        let text = r#"{"entities":[
            {"kind":"object","pose":{"scale":[0.5,0.5,0.5],"translation":[0.2,0,0],"rotation_deg":[0,0,30]},
             "condition":{"red":1.0},"latent_seed":3},
            {"kind":"background","latent_seed":4}]}"#;
        let desc = SceneDescription::from_json(text).unwrap();
        assert_eq!(desc.entities.len(), 2);
        assert_eq!(desc.entities[1].pose, PoseDescription::default());
        let again = SceneDescription::from_json(&desc.to_json().unwrap()).unwrap();
        assert_eq!(desc, again);
    }
}
