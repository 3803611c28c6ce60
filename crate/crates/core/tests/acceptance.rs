//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any fails.
//!
//! Pass criterion ids as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use condnerf::color::{connected_components, count_blobs, foreground_mask, hue_difference, mean_foreground_hue, ForegroundThreshold};
use condnerf::conditioning::{project_condition, ConditionEncoder, ConditionVector, LatentCodes};
use condnerf::data::{generate_synthetic, ImageSet, SyntheticSpec};
use condnerf::discriminator::{ConstantCritic, Critic, Discriminator, DiscriminatorConfig, LinearCritic};
use condnerf::evaluation::{
    canonical_camera, canonical_pose, compute_fid, frechet_distance, generate_samples, linspace, render_condition_sweep,
    render_pose_controls, render_rotation_grid, rotation_warning, seed_latents, sweep_monotone_fraction, tile_scene,
    PoseControl, RandomConvEmbedding, RowSpec,
};
use condnerf::fields::{encode_direction, encode_point, positional_encoding, FieldConfig, FieldDecoder, FieldSample};
use condnerf::nn::{ParamBuilder, ParamStore};
use condnerf::rendering::{render_weights, volume_render, volume_render_tensor, RaySample, RenderedImage};
use condnerf::scene::{compose, DENSITY_EPS};
use condnerf::training::{r1_penalty, smoke_config, Trainer};
use nalgebra::{DMatrix, DVector};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

/// Sequential front-to-back accumulation, written independently of the library.
fn oracle_render(sigma: &[f64], delta: &[f64], feats: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m_f = feats[0].len();
    let mut out = vec![0.0; m_f];
    let mut weights = Vec::new();
    let mut transmittance = 1.0;
    for j in 0..sigma.len() {
        let alpha = 1.0 - (-sigma[j] * delta[j]).exp();
        let w = transmittance * alpha;
        for k in 0..m_f {
            out[k] += w * feats[j][k];
        }
        weights.push(w);
        transmittance *= (-sigma[j] * delta[j]).exp();
    }
    (out, weights)
}

fn random_ray(rng: &mut ChaCha8Rng, max_n: usize, max_f: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let n = rng.random_range(1..=max_n);
    let m_f = rng.random_range(1..=max_f);
    let sigma = (0..n).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..8.0) }).collect();
    let delta = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let feats = (0..n).map(|_| (0..m_f).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    (sigma, delta, feats)
}

fn samples_of(sigma: &[f64], delta: &[f64], feats: &[Vec<f64>]) -> Vec<RaySample> {
    (0..sigma.len())
        .map(|j| RaySample {
            sigma: sigma[j],
            feature: feats[j].clone(),
            delta: delta[j],
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_budget) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (sigma, delta, feats) = random_ray(&mut rng, 8, 4);
        let (expected, _) = oracle_render(&sigma, &delta, &feats);
        let got = volume_render(&samples_of(&sigma, &delta, &feats)).map_err(e2s)?;
        // Batched tensor path, one ray.
        let n = sigma.len();
        let m_f = feats[0].len();
        let s = Tensor::from_vec(sigma.clone(), (1, n), &Device::Cpu).map_err(e2s)?;
        let d = Tensor::from_vec(delta.clone(), (1, n), &Device::Cpu).map_err(e2s)?;
        let f = Tensor::from_vec(feats.concat(), (1, n, m_f), &Device::Cpu).map_err(e2s)?;
        let batched: Vec<f64> = volume_render_tensor(&s, &f, &d).map_err(e2s)?.flatten_all().map_err(e2s)?.to_vec1().map_err(e2s)?;
        for k in 0..m_f {
            worst = worst.max((got[k] - expected[k]).abs()).max((batched[k] - expected[k]).abs());
        }
        let w = render_weights(&sigma, &delta).map_err(e2s)?;
        let budget = 1.0 - (-sigma.iter().zip(&delta).map(|(s, d)| s * d).sum::<f64>()).exp();
        worst_budget = worst_budget.max((w.iter().sum::<f64>() - budget).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-12, "max oracle deviation {worst:e} > 1e-12");
    ensure!(worst_budget <= 1e-9, "weight budget deviation {worst_budget:e} > 1e-9");
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("max dev {worst:.1e}, budget dev {worst_budget:.1e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- criterion 2

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst_vr = 0.0f64;
    for _ in 0..100 {
        let (mut sigma, delta, feats) = random_ray(&mut rng, 8, 4);
        // Keep densities away from the rectifier kink at zero.
        for s in sigma.iter_mut() {
            *s = s.max(0.05);
        }
        let (n, m_f) = (sigma.len(), feats[0].len());
        // Scalar loss L = <u, v> with a random projection u.
        let u: Vec<f64> = (0..m_f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |sigma: &[f64], feats: &[Vec<f64>]| -> f64 {
            let v = volume_render(&samples_of(sigma, &delta, feats)).unwrap();
            v.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let s_var = Var::from_vec(sigma.clone(), (1, n), &Device::Cpu).map_err(e2s)?;
        let f_var = Var::from_vec(feats.concat(), (1, n, m_f), &Device::Cpu).map_err(e2s)?;
        let d = Tensor::from_vec(delta.clone(), (1, n), &Device::Cpu).map_err(e2s)?;
        let ut = Tensor::from_vec(u.clone(), (1, m_f), &Device::Cpu).map_err(e2s)?;
        let v = volume_render_tensor(s_var.as_tensor(), f_var.as_tensor(), &d).map_err(e2s)?;
        let grads = (v * ut).map_err(e2s)?.sum_all().map_err(e2s)?.backward().map_err(e2s)?;
        let gs: Vec<f64> = grads.get(&s_var).ok_or("no sigma grad")?.flatten_all().map_err(e2s)?.to_vec1().map_err(e2s)?;
        let gf: Vec<f64> = grads.get(&f_var).ok_or("no feature grad")?.flatten_all().map_err(e2s)?.to_vec1().map_err(e2s)?;
        let mut fd_s = Vec::new();
        for j in 0..n {
            let (mut p, mut m) = (sigma.clone(), sigma.clone());
            p[j] += h;
            m[j] -= h;
            fd_s.push((loss(&p, &feats) - loss(&m, &feats)) / (2.0 * h));
        }
        let mut fd_f = Vec::new();
        for j in 0..n {
            for k in 0..m_f {
                let (mut p, mut m) = (feats.clone(), feats.clone());
                p[j][k] += h;
                m[j][k] -= h;
                fd_f.push((loss(&sigma, &p) - loss(&sigma, &m)) / (2.0 * h));
            }
        }
        worst_vr = worst_vr.max(rel_err(&gs, &fd_s)).max(rel_err(&gf, &fd_f));
    }
    // Discriminator input gradient on 8x8 images.
    let mut worst_d = 0.0f64;
    for inst in 0..100u64 {
        let disc = Discriminator::new(
            DiscriminatorConfig {
                condition_dim: 3,
                resolution: 8,
                base_channels: 4,
                max_channels: 8,
            },
            100 + inst,
            DType::F64,
        )
        .map_err(e2s)?;
        let x: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let ct = Tensor::from_vec(c, (1, 3), &Device::Cpu).map_err(e2s)?;
        let img = |x: &[f64]| Tensor::from_vec(x.to_vec(), (1, 8, 8, 3), &Device::Cpu).unwrap();
        let logit = |x: &[f64]| -> f64 { disc.logits(&img(x), &ct).unwrap().to_vec1::<f64>().unwrap()[0] };
        let g: Vec<f64> = disc.input_gradient(&img(&x), &ct).map_err(e2s)?.flatten_all().map_err(e2s)?.to_vec1().map_err(e2s)?;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                (logit(&p) - logit(&m)) / (2.0 * h)
            })
            .collect();
        worst_d = worst_d.max(rel_err(&g, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst_vr <= 1e-3, "volume rendering gradient rel err {worst_vr:e}");
    ensure!(worst_d <= 1e-3, "discriminator input gradient rel err {worst_d:e}");
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("rel err render {worst_vr:.1e}, disc {worst_d:.1e}, {secs:.1}s"))
}

// ---------------------------------------------------------------- criterion 3

fn random_entities(rng: &mut ChaCha8Rng, m_f: usize) -> Vec<FieldSample> {
    let n = rng.random_range(1..=5);
    (0..n)
        .map(|_| FieldSample {
            sigma: match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..1e-3),
                _ => rng.random_range(0.0..50.0),
            },
            feature: (0..m_f).map(|_| rng.random_range(-3.0..3.0)).collect(),
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let m_f = rng.random_range(1..=6);
        let ents = random_entities(&mut rng, m_f);
        let base = compose(&ents).map_err(e2s)?;

        // Permutation invariance (bit-exact).
        let mut shuffled = ents.clone();
        shuffled.shuffle(&mut rng);
        let perm = compose(&shuffled).map_err(e2s)?;
        ensure!(perm == base, "case {case}: permutation changed the composition");

        // Single-entity identity (bit-exact when the density is above the guard).
        let one = &ents[..1];
        let single = compose(one).map_err(e2s)?;
        ensure!(single.sigma == one[0].sigma, "case {case}: single density changed");
        if one[0].sigma > DENSITY_EPS {
            ensure!(single.feature == one[0].feature, "case {case}: single feature changed");
        }

        // Density additivity: dyadic densities make the plain sum exact.
        let dyadic: Vec<FieldSample> = ents
            .iter()
            .map(|e| FieldSample {
                sigma: (rng.random_range(0u64..1 << 30) as f64) * 2f64.powi(-20),
                feature: e.feature.clone(),
            })
            .collect();
        let total: f64 = dyadic.iter().map(|e| e.sigma).sum();
        ensure!(compose(&dyadic).map_err(e2s)?.sigma == total, "case {case}: density not additive");

        // Component-wise convexity.
        if base.sigma > DENSITY_EPS {
            for k in 0..m_f {
                let active = ents.iter().filter(|e| e.sigma > 0.0);
                let lo = active.clone().map(|e| e.feature[k]).fold(f64::INFINITY, f64::min);
                let hi = active.map(|e| e.feature[k]).fold(f64::NEG_INFINITY, f64::max);
                ensure!(base.feature[k] >= lo && base.feature[k] <= hi, "case {case}: feature {k} outside hull");
            }
        }

        // Zero-density guard.
        let zeros: Vec<FieldSample> = ents.iter().map(|e| FieldSample { sigma: 0.0, feature: e.feature.clone() }).collect();
        let z = compose(&zeros).map_err(e2s)?;
        ensure!(z.sigma == 0.0 && z.feature.iter().all(|&v| v == 0.0), "case {case}: zero-density guard failed");
    }
    Ok("1000 cases x 5 properties".into())
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let octaves = 10;
    let (mut worst_period, mut worst_oracle, mut max_abs) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let p: f64 = rng.random_range(-1.0..1.0);
        let a = positional_encoding(p, octaves).map_err(e2s)?;
        let b = positional_encoding(p + 2.0, octaves).map_err(e2s)?;
        for j in 0..octaves {
            let arg = 2f64.powi(j as i32) * std::f64::consts::PI * p;
            worst_oracle = worst_oracle.max((a[2 * j] - arg.sin()).abs()).max((a[2 * j + 1] - arg.cos()).abs());
        }
        for (x, y) in a.iter().zip(&b) {
            worst_period = worst_period.max((x - y).abs());
            max_abs = max_abs.max(x.abs());
        }
    }
    ensure!(worst_period <= 1e-9, "periodicity deviation {worst_period:e}");
    ensure!(max_abs <= 1.0, "encoding value {max_abs} outside [-1, 1]");
    ensure!(worst_oracle <= 1e-12, "component oracle deviation {worst_oracle:e}");
    Ok(format!("period dev {worst_period:.1e}, oracle dev {worst_oracle:.1e}"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let cfg = FieldConfig {
        point_octaves: 6,
        direction_octaves: 4,
        shape_dim: 8,
        appearance_dim: 8,
        hidden_dim: 32,
        blocks: 8,
        skip_block: Some(4),
        feature_dim: 16,
        input_scale: 1.0,
    };
    let mut store = ParamStore::new(DType::F64);
    let dec = {
        let mut pb = ParamBuilder::new(&mut store, 5);
        FieldDecoder::new(&mut pb, "field", cfg.clone()).map_err(e2s)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<Vec<f64>> = (0..32)
        .map(|_| encode_point([0; 3].map(|_| rng.random_range(-1.0..1.0)), cfg.point_octaves).unwrap())
        .collect();
    let shape: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut reference: Option<Vec<f64>> = None;
    for pair in 0..100 {
        let dirs: Vec<Vec<f64>> = (0..points.len())
            .map(|_| {
                let v = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
                encode_direction(v.map(|x| x / n), cfg.direction_octaves).unwrap()
            })
            .collect();
        let enc = condnerf::conditioning::ConditionalEncodings {
            shape: shape.clone(),
            appearance: (0..8).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let sigma: Vec<f64> = dec.eval_samples(&points, &dirs, &enc).map_err(e2s)?.into_iter().map(|s| s.sigma).collect();
        match &reference {
            None => reference = Some(sigma),
            Some(r) => ensure!(sigma.iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()), "pair {pair}: density changed"),
        }
    }
    Ok("32 points x 100 direction/appearance pairs, bit-equal".into())
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let (m_c, m_s, m_a) = (4, 6, 5);
    let mut store = ParamStore::new(DType::F64);
    let enc = {
        let mut pb = ParamBuilder::new(&mut store, 6);
        ConditionEncoder::new(&mut pb, "cond", m_c, m_s, m_a).map_err(e2s)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rand_vec = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = ConditionVector::new(rand_vec(&mut rng, m_c));
        let c2 = ConditionVector::new(rand_vec(&mut rng, m_c));
        let z = LatentCodes {
            shape: rand_vec(&mut rng, m_s),
            appearance: rand_vec(&mut rng, m_a),
        };
        let alpha = rng.random_range(-3.0..3.0);
        let p = project_condition(&c, &z, &enc).map_err(e2s)?;
        // Zero latent annihilates.
        let zero = project_condition(&c, &z.scaled(0.0), &enc).map_err(e2s)?;
        ensure!(zero.shape.iter().chain(&zero.appearance).all(|&v| v == 0.0), "zero latent not annihilated");
        // Linear in the latent.
        let scaled = project_condition(&c, &z.scaled(alpha), &enc).map_err(e2s)?;
        for (a, b) in scaled.shape.iter().chain(&scaled.appearance).zip(p.shape.iter().chain(&p.appearance)) {
            worst = worst.max((a - alpha * b).abs());
        }
        // Affine in the condition: P(c + a c2) - P(0) = (P(c) - P(0)) + a (P(c2) - P(0)).
        let zero_c = project_condition(&ConditionVector::zeros(m_c), &z, &enc).map_err(e2s)?;
        let mixed = ConditionVector::new(c.values().iter().zip(c2.values()).map(|(x, y)| x + alpha * y).collect());
        let pm = project_condition(&mixed, &z, &enc).map_err(e2s)?;
        let p2 = project_condition(&c2, &z, &enc).map_err(e2s)?;
        let flat = |e: &condnerf::conditioning::ConditionalEncodings| -> Vec<f64> { e.shape.iter().chain(&e.appearance).copied().collect() };
        let (fm, f1, f2, f0) = (flat(&pm), flat(&p), flat(&p2), flat(&zero_c));
        for i in 0..fm.len() {
            worst = worst.max(((fm[i] - f0[i]) - ((f1[i] - f0[i]) + alpha * (f2[i] - f0[i]))).abs());
        }
    }
    ensure!(worst <= 1e-12, "bilinearity deviation {worst:e}");
    // Forced identity: weights 0, bias 1 -> encodings equal the latents.
    enc.shape.weight.set(&Tensor::zeros((m_c, m_s), DType::F64, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
    enc.appearance.weight.set(&Tensor::zeros((m_c, m_a), DType::F64, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
    enc.shape.bias.as_ref().ok_or("no bias")?.set(&Tensor::ones(m_s, DType::F64, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
    enc.appearance.bias.as_ref().ok_or("no bias")?.set(&Tensor::ones(m_a, DType::F64, &Device::Cpu).map_err(e2s)?).map_err(e2s)?;
    for _ in 0..50 {
        let c = ConditionVector::new(rand_vec(&mut rng, m_c));
        let z = LatentCodes {
            shape: rand_vec(&mut rng, m_s),
            appearance: rand_vec(&mut rng, m_a),
        };
        let p = project_condition(&c, &z, &enc).map_err(e2s)?;
        ensure!(p.shape == z.shape && p.appearance == z.appearance, "forced identity not exact");
    }
    Ok(format!("bilinearity dev {worst:.1e}; identity and zero-latent exact"))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lambda = 10.0;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (8, 8);
        let wv: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let norm2: f64 = wv.iter().map(|v| v * v).sum();
        let weight = Tensor::from_vec(wv, (h, w, 3), &Device::Cpu).map_err(e2s)?;
        let critic = LinearCritic::new(weight, Tensor::new(&[0.3f64, -0.2], &Device::Cpu).map_err(e2s)?, 0.1);
        let x = Tensor::rand(0f64, 1.0, (4, h, w, 3), &Device::Cpu).map_err(e2s)?;
        let c = Tensor::rand(0f64, 1.0, (4, 2), &Device::Cpu).map_err(e2s)?;
        let r1 = r1_penalty(&critic, &x, &c, lambda).map_err(e2s)?.to_scalar::<f64>().map_err(e2s)?;
        worst = worst.max((r1 - lambda * norm2).abs());
        let zero = r1_penalty(&ConstantCritic(0.7), &x, &c, lambda).map_err(e2s)?.to_scalar::<f64>().map_err(e2s)?;
        ensure!(zero == 0.0, "constant critic penalty {zero}");
    }
    ensure!(worst <= 1e-6, "linear critic deviation {worst:e}");
    Ok(format!("linear dev {worst:.1e}, constant exactly 0"))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    let mu1 = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let mu2 = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let same = frechet_distance(&mu1, &cov, &mu1, &cov).map_err(e2s)?;
    ensure!(same.abs() <= 1e-9, "d(a, a) = {same:e}");
    let shifted = frechet_distance(&mu1, &cov, &mu2, &cov).map_err(e2s)?;
    let expected = (&mu1 - &mu2).norm_squared();
    ensure!((shifted - expected).abs() <= 1e-9, "mean shift {shifted} vs {expected}");
    let dir = tempfile::tempdir().map_err(e2s)?;
    let manifest = generate_synthetic(&SyntheticSpec::hue_size(), 256, 8, dir.path()).map_err(e2s)?;
    let set = ImageSet::load(&manifest, 32, true).map_err(e2s)?;
    let embedding = RandomConvEmbedding::new(RandomConvEmbedding::DEFAULT_SEED).map_err(e2s)?;
    let fid = compute_fid(&set.images, &set.images, &embedding).map_err(e2s)?.fid;
    ensure!(fid.abs() <= 1e-6, "compute_fid(real, real) = {fid:e}");
    Ok(format!("d(a,a)={same:.1e}, shift dev {:.1e}, fid(real,real)={fid:.1e}", (shifted - expected).abs()))
}

// ------------------------------------------------------- smoke model (9-11)

const SMOKE_DATASET_SIZE: usize = 1024;
const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);
const FID_COUNT: usize = 512;

struct Smoke {
    _dir: tempfile::TempDir,
    spec: SyntheticSpec,
    data: ImageSet,
    trainer: Trainer,
    checkpoint: PathBuf,
    train_time: Duration,
    fid_init: f64,
    fid_trained: f64,
}

fn smoke_fid(trainer: &Trainer, data: &ImageSet, embedding: &RandomConvEmbedding) -> Result<f64, String> {
    let real = &data.images[..FID_COUNT];
    let conditions = &data.conditions[FID_COUNT..2 * FID_COUNT];
    let fake = generate_samples(&trainer.generator, conditions, 4242, 32).map_err(e2s)?;
    Ok(compute_fid(real, &fake, embedding).map_err(e2s)?.fid)
}

fn build_smoke() -> Result<Smoke, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = SyntheticSpec::hue_size();
    let manifest = generate_synthetic(&spec, SMOKE_DATASET_SIZE, 1, &dir.path().join("data")).map_err(e2s)?;
    let data = ImageSet::load(&manifest, 32, true).map_err(e2s)?;
    let config = smoke_config();
    let mut trainer = Trainer::new(config).map_err(e2s)?;
    let embedding = RandomConvEmbedding::new(RandomConvEmbedding::DEFAULT_SEED).map_err(e2s)?;
    let fid_init = smoke_fid(&trainer, &data, &embedding)?;
    let start = Instant::now();
    trainer.train(&data, Some(&dir.path().join("run"))).map_err(e2s)?;
    let train_time = start.elapsed();
    let fid_trained = smoke_fid(&trainer, &data, &embedding)?;
    let checkpoint = dir.path().join("run").join("latest.safetensors");
    Ok(Smoke {
        _dir: dir,
        spec,
        data,
        trainer,
        checkpoint,
        train_time,
        fid_init,
        fid_trained,
    })
}

fn smoke() -> Result<&'static Smoke, String> {
    static SMOKE: OnceLock<Result<Smoke, String>> = OnceLock::new();
    SMOKE.get_or_init(build_smoke).as_ref().map_err(|e| format!("smoke training failed: {e}"))
}

fn circular_mean(hues: &[f64]) -> f64 {
    let (s, c) = hues.iter().fold((0.0, 0.0), |(s, c), h| (s + h.to_radians().sin(), c + h.to_radians().cos()));
    s.atan2(c).to_degrees().rem_euclid(360.0)
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let s = smoke()?;
    let iterations = s.trainer.config.iterations;
    ensure!(iterations <= 5000, "{iterations} iterations");
    ensure!(s.train_time <= SMOKE_BUDGET, "training took {:.0}s", s.train_time.as_secs_f64());
    let cfg = &s.trainer.config;
    ensure!(
        cfg.generator.output_resolution() == 32 && cfg.generator.feature_resolution() == 8 && cfg.generator.feature_dim() == 32 && cfg.batch_size == 16,
        "smoke configuration differs from the required scale"
    );

    // (a) hue separation with the label-implied sign.
    let t = ForegroundThreshold::default();
    let (c10, c01) = (ConditionVector::new(vec![1.0, 0.0]), ConditionVector::new(vec![0.0, 1.0]));
    let mean_hue = |c: &ConditionVector| -> Result<f64, String> {
        let imgs = generate_samples(&s.trainer.generator, &vec![c.clone(); 64], 99, 32).map_err(e2s)?;
        let hues: Vec<f64> = imgs.iter().filter_map(|i| mean_foreground_hue(i, t)).collect();
        ensure!(hues.len() >= 32, "only {} of 64 samples have foreground", hues.len());
        Ok(circular_mean(&hues))
    };
    let (h10, h01) = (mean_hue(&c10)?, mean_hue(&c01)?);
    let expected_sign = hue_difference(s.spec.appearance(&c01).map_err(e2s)?.0, s.spec.appearance(&c10).map_err(e2s)?.0).signum();
    let separation = expected_sign * hue_difference(h01, h10);
    let a_ok = separation > 60.0;

    // (b) toy-FID improvement.
    let improvement = 1.0 - s.fid_trained / s.fid_init;
    let b_ok = improvement >= 0.5;

    // (c) monotone hue drift under a [0, 3] sweep of the hue attribute.
    let seeds: Vec<u64> = (1000..1020).collect();
    let base = ConditionVector::new(vec![0.0, 0.0]);
    let grid = render_condition_sweep(&s.trainer.generator, &seeds, &base, 0, &linspace(0.0, 3.0, 7)).map_err(e2s)?;
    let fraction = sweep_monotone_fraction(&grid, 1.0, 10.0);
    let c_ok = fraction >= 0.7;

    let detail = format!(
        "{iterations} it in {:.0}s; (a) hue {h10:.0} vs {h01:.0}, separation {separation:.1} deg [{}]; \
         (b) toy-FID {:.4} -> {:.4}, {:.0}% [{}]; (c) monotone rows {:.0}% [{}]",
        s.train_time.as_secs_f64(),
        if a_ok { "ok" } else { "FAIL" },
        s.fid_init,
        s.fid_trained,
        100.0 * improvement,
        if b_ok { "ok" } else { "FAIL" },
        100.0 * fraction,
        if c_ok { "ok" } else { "FAIL" },
    );
    if a_ok && b_ok && c_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let s = smoke()?;
    let rows: Vec<RowSpec> = (0..3)
        .map(|seed| RowSpec {
            seed,
            condition: ConditionVector::new(vec![1.0, 1.0]),
        })
        .collect();
    let grid_of = |t: &Trainer| -> Result<RenderedImage, String> {
        Ok(render_rotation_grid(&t.generator, &rows, &[-10.0, 0.0, 10.0]).map_err(e2s)?.to_image())
    };

    // Two independent runs from the same seed.
    let short = |iterations| -> Result<Trainer, String> {
        let mut cfg = smoke_config();
        cfg.iterations = iterations;
        let mut t = Trainer::new(cfg).map_err(e2s)?;
        t.train(&s.data, None).map_err(e2s)?;
        Ok(t)
    };
    let (run_a, mut run_b) = (short(3)?, short(3)?);
    ensure!(grid_of(&run_a)? == grid_of(&run_b)?, "independent runs rendered different grids");

    // Save -> load of the short run: same output and same next step.
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("ck.safetensors");
    run_b.save(&path).map_err(e2s)?;
    let mut loaded = Trainer::load(&path).map_err(e2s)?;
    ensure!(grid_of(&run_b)? == grid_of(&loaded)?, "reloaded checkpoint renders differently");
    let (images, conditions, fakes) = run_b.batch_for_iteration(&s.data).map_err(e2s)?;
    let images: Vec<RenderedImage> = images.into_iter().cloned().collect();
    let m1 = run_b.step(&images, &conditions, &fakes).map_err(e2s)?;
    let m2 = loaded.step(&images, &conditions, &fakes).map_err(e2s)?;
    ensure!(
        m1.loss_d.to_bits() == m2.loss_d.to_bits() && m1.loss_g.to_bits() == m2.loss_g.to_bits() && m1.r1.to_bits() == m2.r1.to_bits(),
        "next-step losses differ: {m1:?} vs {m2:?}"
    );

    // The smoke checkpoint itself.
    let smoke_loaded = Trainer::load(&s.checkpoint).map_err(e2s)?;
    ensure!(smoke_loaded.iteration == s.trainer.iteration, "checkpoint iteration mismatch");
    let conds = &s.data.conditions[..16];
    let a = generate_samples(&s.trainer.generator, conds, 5, 16).map_err(e2s)?;
    let b = generate_samples(&smoke_loaded.generator, conds, 5, 16).map_err(e2s)?;
    ensure!(a == b, "smoke checkpoint generates differently after reload");
    ensure!(grid_of(&s.trainer)? == grid_of(&s.trainer)?, "repeated render differs");
    Ok(format!("grids bit-identical; next-step losses d={:.6} g={:.6} r1={:.6} identical", m1.loss_d, m1.loss_g, m1.r1))
}

// --------------------------------------------------------------- criterion 11

fn criterion_11() -> Outcome {
    let s = smoke()?;
    let gen = &s.trainer.generator;
    let condition = ConditionVector::new(vec![1.0, 0.0]);
    let seeds: Vec<u64> = (0..4).collect();
    let rows: Vec<RowSpec> = seeds.iter().map(|&seed| RowSpec { seed, condition: condition.clone() }).collect();

    // Rotation by 0 degrees is a no-op: the pose is unchanged and the grid
    // equals the unrotated scenes rendered as the same batch (batch size can
    // change floating-point summation order, so it is held fixed).
    let grid = render_rotation_grid(gen, &rows, &[0.0]).map_err(e2s)?;
    let base_pose = canonical_pose(gen).map_err(e2s)?;
    let camera = canonical_camera(gen);
    ensure!(base_pose.rotated_about_up(0.0) == base_pose, "0-degree rotation changed the pose");
    let mut scenes = Vec::new();
    for &seed in &seeds {
        let (obj, _) = seed_latents(gen, seed).map_err(e2s)?;
        scenes.push(tile_scene(gen, seed, obj, &condition, std::slice::from_ref(&base_pose)).map_err(e2s)?);
    }
    let plain = gen.render_images(&scenes, &vec![camera; scenes.len()]).map_err(e2s)?;
    for (r, &seed) in seeds.iter().enumerate() {
        ensure!(grid.tiles[r][0] == plain[r], "seed {seed}: 0-degree rotation changed the render");
    }

    // Replicating the object at a horizontal offset gives two blobs. Column 0
    // holds the object alone at -0.55, column 1 adds the replica at +0.55. A
    // blob is a component of at least a quarter of the lone object's area,
    // which ignores the few-pixel coloured speckles of the background field.
    let t = ForegroundThreshold::default();
    let add = render_pose_controls(gen, &rows, PoseControl::AddObject, &[-0.55, 0.55]).map_err(e2s)?;
    let (mut singles, mut blobs) = (Vec::new(), Vec::new());
    for (row, &seed) in add.tiles.iter().zip(&seeds) {
        let alone = &row[0];
        let area = connected_components(&foreground_mask(alone, t), alone.height, alone.width)
            .first()
            .copied()
            .ok_or_else(|| format!("seed {seed}: no foreground for the lone object"))?;
        let min_pixels = (area / 4).max(4);
        singles.push(count_blobs(alone, t, min_pixels));
        blobs.push(count_blobs(&row[1], t, min_pixels));
    }
    ensure!(
        singles.iter().all(|&b| b == 1) && blobs.iter().all(|&b| b == 2),
        "blob counts with replica {blobs:?} (alone: {singles:?})"
    );

    // Out-of-range rotation warns; in-range does not.
    let warn = rotation_warning(gen, &base_pose, &camera, 120.0).ok_or("no warning for a 120 degree rotation")?;
    ensure!(warn.contains("outside the trained range"), "unexpected warning text: {warn}");
    ensure!(rotation_warning(gen, &base_pose, &camera, 10.0).is_none(), "warning for an in-range rotation");
    let far = render_rotation_grid(gen, &rows[..1], &[0.0, 120.0]).map_err(e2s)?;
    ensure!(far.sidecar.warnings.len() == 1, "grid sidecar warnings: {:?}", far.sidecar.warnings);
    Ok(format!("0-deg bit-identical; blobs {blobs:?} (alone {singles:?}); warning: \"{warn}\""))
}

// ---------------------------------------------------------------------- main

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("1", "volume rendering oracle", criterion_1),
        ("2", "gradient checks", criterion_2),
        ("3", "composition operator", criterion_3),
        ("4", "positional encoding", criterion_4),
        ("5", "density view/appearance invariance", criterion_5),
        ("6", "conditional projection", criterion_6),
        ("7", "R1 analytic check", criterion_7),
        ("8", "FID self-tests", criterion_8),
        ("9", "training smoke test", criterion_9),
        ("10", "determinism and persistence", criterion_10),
        ("11", "scene controls on smoke checkpoint", criterion_11),
    ];
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  [{id:>2}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  [{id:>2}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
