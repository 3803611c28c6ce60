//! Camera poses, pose priors, pinhole ray generation and stratified depth sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};

/// Orbit camera looking at `look_at`; the world up axis is +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub look_at: [f64; 3],
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Self {
        Self {
            azimuth_deg,
            elevation_deg,
            radius,
            look_at: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            bail_arg!("camera radius must be positive, got {}", self.radius);
        }
        if !(self.elevation_deg.abs() < 90.0) {
            bail_arg!("camera elevation must lie in (-90, 90) degrees, got {}", self.elevation_deg);
        }
        if !self.azimuth_deg.is_finite() || self.look_at.iter().any(|v| !v.is_finite()) {
            bail_arg!("camera pose must be finite");
        }
        Ok(())
    }

    pub fn origin(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [
            self.look_at[0] + self.radius * el.cos() * az.cos(),
            self.look_at[1] + self.radius * el.cos() * az.sin(),
            self.look_at[2] + self.radius * el.sin(),
        ]
    }

    /// Orthonormal camera frame `(right, up, forward)` in world coordinates.
    pub fn frame(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let o = self.origin();
        let forward = normalize(sub(self.look_at, o));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        (right, up, forward)
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Closed interval `[lo, hi]` sampled uniformly; `lo == hi` is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            bail_arg!("{what} interval [{}, {}] is inverted or non-finite", self.lo, self.hi);
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            // Still consume a draw so the stream does not depend on the ranges.
            let _: f64 = rng.random();
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * rng.random::<f64>()
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Uniform prior over camera poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRanges {
    pub azimuth_deg: Interval,
    pub elevation_deg: Interval,
    pub radius: Interval,
}

impl CameraRanges {
    /// Narrow frontal prior (face-like datasets).
    pub fn face_like(radius: f64) -> Self {
        Self {
            azimuth_deg: Interval::new(-45.0, 45.0),
            elevation_deg: Interval::new(-10.0, 10.0),
            radius: Interval::fixed(radius),
        }
    }

    /// Full turntable prior (car-like datasets).
    pub fn car_like(radius: f64) -> Self {
        Self {
            azimuth_deg: Interval::new(0.0, 360.0),
            elevation_deg: Interval::new(0.0, 20.0),
            radius: Interval::fixed(radius),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.azimuth_deg.validate("azimuth")?;
        self.elevation_deg.validate("elevation")?;
        self.radius.validate("radius")?;
        if self.elevation_deg.lo <= -90.0 || self.elevation_deg.hi >= 90.0 {
            bail_arg!("elevation range must stay inside (-90, 90)");
        }
        if self.radius.lo <= 0.0 {
            bail_arg!("camera radius range must be positive");
        }
        Ok(())
    }

    /// Centre of every range.
    pub fn mean_pose(&self) -> CameraPose {
        CameraPose::new(
            0.5 * (self.azimuth_deg.lo + self.azimuth_deg.hi),
            0.5 * (self.elevation_deg.lo + self.elevation_deg.hi),
            0.5 * (self.radius.lo + self.radius.hi),
        )
    }
}

pub fn sample_camera(ranges: &CameraRanges, seed: u64) -> Result<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_camera_with(&mut rng, ranges)
}

pub fn sample_camera_with<R: Rng>(rng: &mut R, ranges: &CameraRanges) -> Result<CameraPose> {
    ranges.validate()?;
    Ok(CameraPose::new(
        ranges.azimuth_deg.sample(rng),
        ranges.elevation_deg.sample(rng),
        ranges.radius.sample(rng),
    ))
}

/// Pinhole rays through pixel centres, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Rays {
    pub origin: [f64; 3],
    pub directions: Vec<[f64; 3]>,
    pub height: usize,
    pub width: usize,
}

pub fn generate_rays(pose: &CameraPose, height: usize, width: usize, fov_deg: f64) -> Result<Rays> {
    pose.validate()?;
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        bail_arg!("field of view must lie in (0, 180) degrees, got {fov_deg}");
    }
    if height == 0 || width == 0 {
        bail_arg!("ray grid must be non-empty");
    }
    let (right, up, forward) = pose.frame();
    let half = (0.5 * fov_deg.to_radians()).tan();
    let aspect = width as f64 / height as f64;
    let mut directions = Vec::with_capacity(height * width);
    for i in 0..height {
        let v = (0.5 - (i as f64 + 0.5) / height as f64) * 2.0 * half;
        for j in 0..width {
            let u = ((j as f64 + 0.5) / width as f64 - 0.5) * 2.0 * half * aspect;
            directions.push(normalize([
                forward[0] + u * right[0] + v * up[0],
                forward[1] + u * right[1] + v * up[1],
                forward[2] + u * right[2] + v * up[2],
            ]));
        }
    }
    Ok(Rays {
        origin: pose.origin(),
        directions,
        height,
        width,
    })
}

/// Sample depths along a ray and the spacing assigned to each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Depths {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Stratified sampling: one uniform draw per equal-width bin of `[near, far]`
/// (bin midpoints when `jitter` is `None`).
///
/// Spacings are `t[j+1] - t[j]`; the last sample additionally takes the slack
/// at both ends, `far - t[n-1] + t[0] - near`, so the spacings always sum to
/// `far - near` (and equal the bin width for midpoints).
pub fn stratified_depths(near: f64, far: f64, n: usize, jitter: Option<u64>) -> Result<Depths> {
    match jitter {
        Some(seed) => stratified_depths_with(near, far, n, Some(&mut ChaCha8Rng::seed_from_u64(seed))),
        None => stratified_depths_with::<ChaCha8Rng>(near, far, n, None),
    }
}

pub fn stratified_depths_with<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Result<Depths> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        bail_arg!("depth range must satisfy 0 < near < far, got [{near}, {far}]");
    }
    if n == 0 {
        bail_arg!("need at least one sample per ray");
    }
    let width = (far - near) / n as f64;
    let t: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|j| near + (j as f64 + rng.random::<f64>()) * width).collect(),
        None => (0..n).map(|j| near + (j as f64 + 0.5) * width).collect(),
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push((far - t[n - 1]) + (t[0] - near));
    // A draw of exactly 0 in two adjacent bins cannot produce a zero spacing,
    // but a draw of exactly 1 followed by 0 can; nudge such ties apart.
    for d in delta.iter_mut() {
        if *d <= 0.0 {
            *d = f64::EPSILON * far;
        }
    }
    Ok(Depths { t, delta })
}
