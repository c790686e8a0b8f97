//! Synthetic action sequences.
//!
//! Every sequence traces the same smooth latent curve `z(p)` over progress
//! `p ∈ [0, 1]`, but at its own randomly warped pace. Observations are a fixed
//! affine map of the latent point plus Gaussian noise, so two noise-free
//! sequences agree exactly at equal progress.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, PhaseAnnotation};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Sinusoidal components in the latent curve.
const CURVE_COMPONENTS: usize = 4;
/// Attempts at drawing a pace that visits every phase before giving up.
const MAX_PACE_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub num_phases: usize,
    pub noise_std: f64,
    pub warp_strength: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_sequences: 50,
            min_len: 60,
            max_len: 120,
            latent_dim: 2,
            obs_dim: 16,
            num_phases: 4,
            noise_std: 0.05,
            warp_strength: 1.0,
            fps: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_phases >= 2, Contract, "need at least 2 phases");
        ensure!(
            self.min_len >= self.num_phases,
            Contract,
            "min_len {} must be >= number of phases {}",
            self.min_len,
            self.num_phases
        );
        ensure!(
            self.min_len <= self.max_len,
            Contract,
            "min_len {} exceeds max_len {}",
            self.min_len,
            self.max_len
        );
        ensure!(
            self.latent_dim >= 1 && self.obs_dim >= 1,
            Contract,
            "dimensions must be positive"
        );
        ensure!(
            self.noise_std >= 0.0 && self.noise_std.is_finite(),
            Contract,
            "noise_std must be >= 0"
        );
        ensure!(
            self.warp_strength >= 0.0 && self.warp_strength.is_finite(),
            Contract,
            "warp_strength must be >= 0"
        );
        ensure!(self.fps > 0.0, Contract, "fps must be positive");
        Ok(())
    }
}

/// Generated sequences together with the ground-truth progress of every frame.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub sequences: Vec<FeatureSequence>,
    pub progress: Vec<Vec<f64>>,
    curve: LatentCurve,
}

impl SyntheticDataset {
    /// Noise-free observation at progress `p`.
    pub fn observe(&self, p: f64) -> Vec<f64> {
        self.curve.observe(p)
    }
}

#[derive(Debug, Clone)]
struct LatentCurve {
    /// `[latent][component] -> (amplitude, frequency, phase)`
    terms: Vec<Vec<(f64, f64, f64)>>,
    /// `obs_dim × latent_dim`
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LatentCurve {
    fn sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let freqs: Vec<f64> = (0..CURVE_COMPONENTS)
            .map(|c| c as f64 + rng.random_range(0.5..1.5))
            .collect();
        let terms = (0..cfg.latent_dim)
            .map(|_| {
                freqs
                    .iter()
                    .map(|&f| {
                        let amp: f64 = rng.random_range(0.5..1.0);
                        (amp, f, rng.random_range(0.0..TAU))
                    })
                    .collect()
            })
            .collect();
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let weight = (0..cfg.obs_dim)
            .map(|_| {
                (0..cfg.latent_dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let bias = (0..cfg.obs_dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { terms, weight, bias }
    }

    fn latent(&self, p: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|comps| comps.iter().map(|&(a, f, ph)| a * (TAU * f * p + ph).sin()).sum())
            .collect()
    }

    fn observe(&self, p: f64) -> Vec<f64> {
        let z = self.latent(p);
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>())
            .collect()
    }
}

/// Monotone progress `p_0 = 0 < … < p_{L−1} = 1` from log-normal step rates.
fn sample_progress(len: usize, warp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    let mut p = Vec::with_capacity(len);
    p.push(0.0);
    let mut acc = 0.0;
    for _ in 1..len {
        let g: f64 = rng.sample(StandardNormal);
        acc += (warp * g).exp();
        p.push(acc);
    }
    for x in &mut p {
        *x /= acc;
    }
    p[len - 1] = 1.0;
    p
}

fn phase_labels(progress: &[f64], k: usize) -> Vec<usize> {
    progress
        .iter()
        .map(|&p| ((p * k as f64).floor() as usize).min(k - 1))
        .collect()
}

/// Every phase present and the last phase longer than one frame, so that each
/// phase has its own key event before the end frame.
fn labels_cover_phases(labels: &[usize], k: usize) -> bool {
    let n = labels.len();
    (0..k).all(|ph| labels.contains(&ph)) && n >= 2 && labels[n - 2] == k - 1
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<FeatureSequence>> {
    Ok(generate_synthetic_detailed(cfg)?.sequences)
}

/// Generate sequences and keep the per-frame progress used to build them.
pub fn generate_synthetic_detailed(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let curve = LatentCurve::sample(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise_std validated");

    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    let mut all_progress = Vec::with_capacity(cfg.num_sequences);
    for s in 0..cfg.num_sequences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut progress = sample_progress(len, cfg.warp_strength, &mut rng);
        let mut labels = phase_labels(&progress, cfg.num_phases);
        let mut draws = 1;
        while !labels_cover_phases(&labels, cfg.num_phases) {
            ensure!(
                draws < MAX_PACE_DRAWS,
                Contract,
                "could not draw a pace covering {} phases in {} frames",
                cfg.num_phases,
                len
            );
            progress = sample_progress(len, cfg.warp_strength, &mut rng);
            labels = phase_labels(&progress, cfg.num_phases);
            draws += 1;
        }

        let mut data = Vec::with_capacity(len * cfg.obs_dim);
        for &p in &progress {
            for x in curve.observe(p) {
                let eps = if cfg.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(x + eps);
            }
        }
        let frames = Tensor::matrix(len, cfg.obs_dim, data)?;
        let annotation = PhaseAnnotation::from_phase_labels(labels)?;
        sequences.push(FeatureSequence::new(
            format!("seq{s:04}"),
            frames,
            cfg.fps,
            Some(annotation),
        )?);
        all_progress.push(progress);
    }
    Ok(SyntheticDataset {
        sequences,
        progress: all_progress,
        curve,
    })
}
