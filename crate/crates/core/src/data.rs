//! Dataset manifests, image batching and the procedural synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::hsv_to_rgb;
use crate::conditioning::ConditionVector;
use crate::error::{Error, Result};
use crate::rendering::{Interval, RenderedImage};

pub const MANIFEST_FILE: &str = "manifest.csv";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Binary,
    OneHotClass,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Path relative to the manifest root.
    pub file: PathBuf,
    pub condition: ConditionVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub attributes: Vec<String>,
    pub kinds: Vec<AttributeKind>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn condition_dim(&self) -> usize {
        self.attributes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_class_dataset(&self) -> bool {
        !self.kinds.is_empty() && self.kinds.iter().all(|k| *k == AttributeKind::OneHotClass)
    }

    /// Class index of a record's condition when the dataset is one-hot.
    pub fn class_of(&self, condition: &ConditionVector) -> Option<usize> {
        if !self.is_class_dataset() {
            return None;
        }
        one_hot_index(condition)
    }

    pub fn path_of(&self, record: &Record) -> PathBuf {
        self.root.join(&record.file)
    }

    /// Writes the CSV form (`file,<attributes...>`) to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut header = vec!["file".to_string()];
        header.extend(self.attributes.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.records {
            let mut row = vec![r.file.to_string_lossy().replace('\\', "/")];
            row.extend(r.condition.values().iter().map(|v| format_value(*v)));
            w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn one_hot_index(c: &ConditionVector) -> Option<usize> {
    let v = c.values();
    let ones = v.iter().filter(|&&x| x == 1.0).count();
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    (ones == 1 && ones + zeros == v.len()).then(|| v.iter().position(|&x| x == 1.0).expect("one entry"))
}

/// Infers per-attribute kinds: all attributes form one one-hot class group
/// when every record has exactly one 1 (and there are at least two
/// attributes); otherwise each `{0,1}` column is binary and anything else continuous.
pub fn infer_kinds(records: &[Record], m_c: usize) -> Vec<AttributeKind> {
    if m_c >= 2 && !records.is_empty() && records.iter().all(|r| one_hot_index(&r.condition).is_some()) {
        return vec![AttributeKind::OneHotClass; m_c];
    }
    (0..m_c)
        .map(|k| {
            if records.iter().all(|r| matches!(r.condition.values()[k], v if v == 0.0 || v == 1.0)) {
                AttributeKind::Binary
            } else {
                AttributeKind::Continuous
            }
        })
        .collect()
}

/// Loads a CSV manifest, or a directory that either holds `manifest.csv` or
/// has one sub-directory of images per class.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        let csv_path = path.join(MANIFEST_FILE);
        if csv_path.is_file() {
            return load_csv_manifest(&csv_path);
        }
        return load_class_folders(path);
    }
    if !path.exists() {
        return Err(Error::Data(format!("manifest {} does not exist", path.display())));
    }
    load_csv_manifest(path)
}

fn load_csv_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.clone();
    if headers.get(0).map(str::trim) != Some("file") {
        return Err(Error::Data(format!("{}: first column must be named `file`", path.display())));
    }
    let attributes: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if attributes.is_empty() {
        return Err(Error::Data(format!("{}: manifest has no attribute columns", path.display())));
    }
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), row + 2)))?;
        let file = rec.get(0).unwrap_or("").trim().to_string();
        if rec.len() != attributes.len() + 1 {
            return Err(Error::Data(format!(
                "record {file:?} (row {}) has {} labels, expected {}",
                row + 2,
                rec.len().saturating_sub(1),
                attributes.len()
            )));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("record {file:?}: bad label ({e})")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("record {file:?}: non-finite label")));
        }
        let full = root.join(&file);
        if !full.is_file() {
            return Err(Error::Data(format!("record references missing file {}", full.display())));
        }
        records.push(Record {
            file: PathBuf::from(file),
            condition: ConditionVector::new(values),
        });
    }
    // Columns coded as {-1, 1} are mapped to {0, 1}.
    for k in 0..attributes.len() {
        let column = records.iter().map(|r| r.condition.values()[k]);
        let signed = column.clone().all(|v| v == -1.0 || v == 1.0) && column.clone().any(|v| v == -1.0);
        if signed {
            for r in records.iter_mut() {
                r.condition.0[k] = (r.condition.0[k] + 1.0) / 2.0;
            }
        }
    }
    let kinds = infer_kinds(&records, attributes.len());
    Ok(DatasetManifest {
        root,
        attributes,
        kinds,
        records,
    })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn load_class_folders(root: &Path) -> Result<DatasetManifest> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data(format!("{} has neither a manifest nor class folders", root.display())));
    }
    let attributes: Vec<String> = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let mut records = Vec::new();
    for (k, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            let rel = file.strip_prefix(root).map(Path::to_path_buf).unwrap_or(file.clone());
            records.push(Record {
                file: rel,
                condition: ConditionVector::one_hot(attributes.len(), k)?,
            });
        }
    }
    let kinds = if attributes.len() >= 2 {
        vec![AttributeKind::OneHotClass; attributes.len()]
    } else {
        vec![AttributeKind::Binary]
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        attributes,
        kinds,
        records,
    })
}

/// Decodes an image, centre-crops it to a square and resizes to `resolution`.
pub fn load_image(path: &Path, resolution: usize) -> Result<RenderedImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let res = resolution as u32;
    let resized = if side == res {
        cropped
    } else {
        image::imageops::resize(&cropped, res, res, FilterType::Triangle)
    };
    Ok(RenderedImage::from_rgb8(&resized))
}

/// Uniform permutation of `0..n` for a given epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<RenderedImage>,
    pub conditions: Vec<ConditionVector>,
    pub files: Vec<PathBuf>,
}

/// One epoch of shuffled, decoded batches; the last batch may be partial.
pub struct BatchIterator<'a> {
    manifest: &'a DatasetManifest,
    batch_size: usize,
    resolution: usize,
    order: Vec<usize>,
    position: usize,
    /// Fail on undecodable images instead of skipping them with a warning.
    pub hard_fail: bool,
}

impl<'a> BatchIterator<'a> {
    pub fn new(manifest: &'a DatasetManifest, batch_size: usize, resolution: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        Ok(Self {
            manifest,
            batch_size,
            resolution,
            order: epoch_permutation(manifest.len(), seed, epoch),
            position: 0,
            hard_fail: false,
        })
    }

    pub fn hard_fail(mut self, yes: bool) -> Self {
        self.hard_fail = yes;
        self
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.position >= self.order.len() {
            return None;
        }
        let end = (self.position + self.batch_size).min(self.order.len());
        let mut batch = Batch {
            images: Vec::new(),
            conditions: Vec::new(),
            files: Vec::new(),
        };
        for &i in &self.order[self.position..end] {
            let record = &self.manifest.records[i];
            let path = self.manifest.path_of(record);
            match load_image(&path, self.resolution) {
                Ok(img) => {
                    batch.images.push(img);
                    batch.conditions.push(record.condition.clone());
                    batch.files.push(record.file.clone());
                }
                Err(e) if !self.hard_fail => log::warn!("skipping record: {e}"),
                Err(e) => return Some(Err(e)),
            }
        }
        self.position = end;
        Some(Ok(batch))
    }
}

/// First epoch of batches for `seed`.
pub fn batch_iterator(manifest: &DatasetManifest, batch_size: usize, resolution: usize, seed: u64) -> Result<BatchIterator<'_>> {
    BatchIterator::new(manifest, batch_size, resolution, seed, 0)
}

/// Fully decoded dataset held in memory.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub attributes: Vec<String>,
    pub kinds: Vec<AttributeKind>,
    pub images: Vec<RenderedImage>,
    pub conditions: Vec<ConditionVector>,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, resolution: usize, hard_fail: bool) -> Result<Self> {
        let mut set = Self {
            attributes: manifest.attributes.clone(),
            kinds: manifest.kinds.clone(),
            images: Vec::new(),
            conditions: Vec::new(),
        };
        for record in &manifest.records {
            match load_image(&manifest.path_of(record), resolution) {
                Ok(img) => {
                    set.images.push(img);
                    set.conditions.push(record.condition.clone());
                }
                Err(e) if !hard_fail => log::warn!("skipping record: {e}"),
                Err(e) => return Err(e),
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn condition_dim(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_class_dataset(&self) -> bool {
        !self.kinds.is_empty() && self.kinds.iter().all(|k| *k == AttributeKind::OneHotClass)
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        if self.is_class_dataset() {
            one_hot_index(&self.conditions[i])
        } else {
            None
        }
    }

    /// Record indices of global batch `k`: epochs are consecutive shuffles,
    /// each split into `ceil(n / batch)` batches (the last may be partial).
    pub fn batch_indices(&self, batch_size: usize, seed: u64, k: u64) -> Result<Vec<usize>> {
        if batch_size == 0 || self.is_empty() {
            return Err(Error::InvalidArgument("need a non-empty dataset and batch size".into()));
        }
        let per_epoch = self.len().div_ceil(batch_size) as u64;
        let (epoch, j) = (k / per_epoch, (k % per_epoch) as usize);
        let perm = epoch_permutation(self.len(), seed, epoch);
        let start = j * batch_size;
        Ok(perm[start..(start + batch_size).min(self.len())].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticShape {
    Disk,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    pub hue_deg: f64,
}

/// How labels map to image content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SyntheticLabels {
    /// One-hot classes (a single 0/1 attribute for one class), each with a
    /// fixed hue; assigned round-robin.
    Classes { classes: Vec<SyntheticClass> },
    /// Two independent binary attributes: `hue` switches the hue from
    /// `hue_at_zero` to `hue_at_one` degrees and `size` switches the radius
    /// from the low to the high end of the `radius` interval. Fractional
    /// values (only meaningful at inference) interpolate linearly.
    HueSize { hue_at_zero: f64, hue_at_one: f64 },
}

impl SyntheticLabels {
    /// Red/blue one-hot classes.
    pub fn red_blue() -> Self {
        SyntheticLabels::Classes {
            classes: vec![
                SyntheticClass {
                    name: "red".into(),
                    hue_deg: 0.0,
                },
                SyntheticClass {
                    name: "blue".into(),
                    hue_deg: 240.0,
                },
            ],
        }
    }

    /// Binary hue (blue at 0, red at 1, i.e. the hue rises through magenta) and size.
    pub fn hue_size() -> Self {
        SyntheticLabels::HueSize {
            hue_at_zero: 240.0,
            hue_at_one: 360.0,
        }
    }

    pub fn attributes(&self) -> Vec<String> {
        match self {
            SyntheticLabels::Classes { classes } => classes.iter().map(|c| c.name.clone()).collect(),
            SyntheticLabels::HueSize { .. } => vec!["hue".into(), "size".into()],
        }
    }
}

/// Procedural dataset: one shaded, hue-coded shape per image on a grey
/// background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub shape: SyntheticShape,
    pub labels: SyntheticLabels,
    pub saturation: f64,
    /// Grey level of the background.
    pub background: Interval,
    /// Shape radius (half side for squares) as a fraction of the image size.
    pub radius: Interval,
    /// Maximum centre offset as a fraction of the image size.
    pub center_jitter: f64,
    /// Sub-samples per pixel side used for anti-aliasing.
    pub supersample: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            shape: SyntheticShape::Disk,
            labels: SyntheticLabels::red_blue(),
            saturation: 0.85,
            background: Interval::new(0.35, 0.65),
            radius: Interval::new(0.17, 0.23),
            center_jitter: 0.06,
            supersample: 4,
        }
    }
}

impl SyntheticSpec {
    /// Binary hue/size labels (see [`SyntheticLabels::hue_size`]).
    pub fn hue_size() -> Self {
        Self {
            labels: SyntheticLabels::hue_size(),
            radius: Interval::new(0.15, 0.25),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid synthetic spec: {m}")));
        if self.image_size == 0 || self.supersample == 0 {
            return bad("image size and supersampling must be positive");
        }
        match &self.labels {
            SyntheticLabels::Classes { classes } if classes.is_empty() => return bad("need at least one class"),
            SyntheticLabels::HueSize { hue_at_zero, hue_at_one } if !(hue_at_zero.is_finite() && hue_at_one.is_finite()) => {
                return bad("hues must be finite")
            }
            _ => {}
        }
        if !(self.saturation > 0.0 && self.saturation <= 1.0) {
            return bad("saturation must lie in (0, 1]");
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.background.validate("background").map_err(wrap)?;
        self.radius.validate("radius").map_err(wrap)?;
        if self.background.lo < 0.0 || self.background.hi > 1.0 || self.radius.lo <= 0.0 || self.radius.hi > 0.5 {
            return bad("background must lie in [0, 1] and radius in (0, 0.5]");
        }
        if !(self.center_jitter >= 0.0 && self.center_jitter < 0.5) {
            return bad("centre jitter must lie in [0, 0.5)");
        }
        Ok(())
    }

    pub fn condition_dim(&self) -> usize {
        self.labels.attributes().len()
    }

    /// Hue (degrees) and radius fraction implied by a condition vector.
    pub fn appearance(&self, condition: &ConditionVector) -> Result<(f64, f64)> {
        condition.check_len(self.condition_dim())?;
        let c = condition.values();
        match &self.labels {
            SyntheticLabels::Classes { classes } => {
                let k = if classes.len() == 1 {
                    0
                } else {
                    one_hot_index(condition)
                        .ok_or_else(|| Error::InvalidArgument(format!("condition {c:?} is not one-hot")))?
                };
                Ok((classes[k].hue_deg, (self.radius.lo + self.radius.hi) / 2.0))
            }
            SyntheticLabels::HueSize { hue_at_zero, hue_at_one } => Ok((
                (hue_at_zero + c[0] * (hue_at_one - hue_at_zero)).rem_euclid(360.0),
                self.radius.lo + c[1] * (self.radius.hi - self.radius.lo),
            )),
        }
    }

    /// Label of the `index`-th generated image: round-robin classes, or
    /// independent fair coin flips per attribute drawn from `rng`.
    pub fn draw_condition<R: Rng>(&self, index: usize, rng: &mut R) -> ConditionVector {
        match &self.labels {
            SyntheticLabels::Classes { classes } if classes.len() == 1 => ConditionVector::new(vec![1.0]),
            SyntheticLabels::Classes { classes } => {
                let mut v = vec![0.0; classes.len()];
                v[index % classes.len()] = 1.0;
                ConditionVector::new(v)
            }
            SyntheticLabels::HueSize { .. } => {
                let mut bit = || if rng.random::<bool>() { 1.0 } else { 0.0 };
                ConditionVector::new(vec![bit(), bit()])
            },
        }
    }

    /// Renders one image for `condition` with a given random stream. Class
    /// labels draw the radius at random; hue/size labels fix it.
    pub fn render<R: Rng>(&self, condition: &ConditionVector, rng: &mut R) -> Result<RenderedImage> {
        let (hue, radius_frac) = self.appearance(condition)?;
        let n = self.image_size;
        let grey = self.background.sample(rng);
        let drawn = self.radius.sample(rng);
        let radius = match self.labels {
            SyntheticLabels::Classes { .. } => drawn,
            SyntheticLabels::HueSize { .. } => radius_frac,
        } * n as f64;
        let cx = (0.5 + self.center_jitter * (2.0 * rng.random::<f64>() - 1.0)) * n as f64;
        let cy = (0.5 + self.center_jitter * (2.0 * rng.random::<f64>() - 1.0)) * n as f64;
        let ss = self.supersample;
        let mut data = Vec::with_capacity(n * n * 3);
        for i in 0..n {
            for j in 0..n {
                let mut acc = [0.0; 3];
                for a in 0..ss {
                    for b in 0..ss {
                        let y = i as f64 + (a as f64 + 0.5) / ss as f64;
                        let x = j as f64 + (b as f64 + 0.5) / ss as f64;
                        let (dx, dy) = ((x - cx) / radius, (y - cy) / radius);
                        let (inside, rho2) = match self.shape {
                            SyntheticShape::Disk => (dx * dx + dy * dy <= 1.0, dx * dx + dy * dy),
                            SyntheticShape::Square => (dx.abs() <= 1.0 && dy.abs() <= 1.0, dx.abs().max(dy.abs()).powi(2)),
                        };
                        let c = if inside {
                            hsv_to_rgb([hue, self.saturation, 0.95 - 0.35 * rho2])
                        } else {
                            [grey; 3]
                        };
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                let m = (ss * ss) as f64;
                data.extend(acc.iter().map(|v| v / m));
            }
        }
        Ok(RenderedImage {
            height: n,
            width: n,
            data,
        })
    }
}

/// Writes `count` PNG images plus `manifest.csv` into `out_dir`; everything
/// random is drawn from `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attributes = spec.labels.attributes();
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let condition = spec.draw_condition(i, &mut rng);
        let img = spec.render(&condition, &mut rng)?;
        let file = PathBuf::from("images").join(format!("{i:06}.png"));
        let path = out_dir.join(&file);
        img.save_png(&path)?;
        records.push(Record { file, condition });
    }
    let kinds = infer_kinds(&records, attributes.len());
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        attributes,
        kinds,
        records,
    };
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
