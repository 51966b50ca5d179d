//! Deterministic synthetic HSI + LiDAR scenes with known class structure.
//!
//! Each class gets a band-smooth signature (uniform noise through a
//! moving average), the layout is a Voronoi partition over `g²` seeded
//! sites, pixel spectra are the class signature plus Gaussian noise, and
//! LiDAR encodes the class as `c / K` plus noise. All values are clamped to
//! `[0, 1]` and rounded to float32.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{quantize, HsiCube, LabelMap, LidarMap, Scene};
use crate::error::{Error, Result};
use crate::metrics::PALETTE_CLASSES;
use crate::rng::{self, tag};

const MAX_LAYOUT_ATTEMPTS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub spectral_noise: f64,
    pub lidar_noise: f64,
    /// Moving-average window for signatures; odd.
    pub smoothing: usize,
    /// Expected Voronoi regions per axis.
    pub granularity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            bands: 40,
            height: 64,
            width: 64,
            seed: 42,
            spectral_noise: 0.05,
            lidar_noise: 0.05,
            smoothing: 5,
            granularity: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0
            || self.bands == 0
            || self.height == 0
            || self.width == 0
            || self.granularity == 0
        {
            return Err(Error::Config(
                "classes, bands, extents and granularity must be positive".into(),
            ));
        }
        if self.classes > PALETTE_CLASSES {
            return Err(Error::Config(format!(
                "at most {PALETTE_CLASSES} classes are supported, got {}",
                self.classes
            )));
        }
        if self.smoothing.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "smoothing window must be odd, got {}",
                self.smoothing
            )));
        }
        if !(self.spectral_noise >= 0.0 && self.lidar_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Band-smooth signature of class `class` (1-based).
pub fn class_signature(cfg: &SynthConfig, class: usize) -> Vec<f64> {
    let mut rng = rng::stream(cfg.seed, tag::SIGNATURE, class as u64);
    let w = cfg.smoothing;
    let raw: Vec<f64> = (0..cfg.bands + w - 1)
        .map(|_| rng.random::<f64>())
        .collect();
    raw.windows(w)
        .map(|win| win.iter().sum::<f64>() / w as f64)
        .collect()
}

/// Voronoi labels over `g²` sites, retrying with a new sub-seed until every
/// class owns at least one pixel.
pub fn layout(cfg: &SynthConfig) -> Result<Vec<u16>> {
    let sites = cfg.granularity * cfg.granularity;
    for attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let mut rng = rng::stream(cfg.seed, tag::LAYOUT, attempt);
        let pos: Vec<(f64, f64)> = (0..sites)
            .map(|_| {
                (
                    rng.random::<f64>() * cfg.height as f64,
                    rng.random::<f64>() * cfg.width as f64,
                )
            })
            .collect();
        let mut owner: Vec<u16> = (0..sites).map(|i| (i % cfg.classes) as u16 + 1).collect();
        owner.shuffle(&mut rng);

        let mut labels = Vec::with_capacity(cfg.height * cfg.width);
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &(sy, sx)) in pos.iter().enumerate() {
                    let d = (sy - y).powi(2) + (sx - x).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                labels.push(owner[best]);
            }
        }
        let mut present = vec![false; cfg.classes + 1];
        labels.iter().for_each(|&l| present[l as usize] = true);
        if present[1..].iter().all(|&p| p) {
            return Ok(labels);
        }
    }
    Err(Error::Config(format!(
        "no layout covering all {} classes within {MAX_LAYOUT_ATTEMPTS} attempts",
        cfg.classes
    )))
}

pub fn generate(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let signatures: Vec<Vec<f64>> = (1..=cfg.classes).map(|c| class_signature(cfg, c)).collect();
    let labels = layout(cfg)?;

    let spectral =
        Normal::new(0.0, cfg.spectral_noise).map_err(|e| Error::Config(e.to_string()))?;
    let elevation = Normal::new(0.0, cfg.lidar_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng::stream(cfg.seed, tag::NOISE, 0);
    let n = cfg.height * cfg.width;
    let mut hsi = Vec::with_capacity(n * cfg.bands);
    let mut lidar = Vec::with_capacity(n);
    for &l in &labels {
        let class = usize::from(l);
        for &s in &signatures[class - 1] {
            hsi.push(quantize((s + spectral.sample(&mut rng)).clamp(0.0, 1.0)));
        }
        let height = class as f64 / cfg.classes as f64;
        lidar.push(quantize(
            (height + elevation.sample(&mut rng)).clamp(0.0, 1.0),
        ));
    }
    Scene::new(
        format!("synthetic-seed{}", cfg.seed),
        HsiCube::new(cfg.height, cfg.width, cfg.bands, hsi)?,
        LidarMap::new(cfg.height, cfg.width, lidar)?,
        LabelMap::new(cfg.height, cfg.width, cfg.classes, labels)?,
    )
}
