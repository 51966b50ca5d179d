use serde::{Deserialize, Serialize};

use super::scene::{HsiCube, LidarMap, Scene};
use crate::error::{Error, Result};

/// Per-channel min/max taken from training pixels only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub hsi_min: Vec<f64>,
    pub hsi_max: Vec<f64>,
    pub lidar_min: f64,
    pub lidar_max: f64,
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl NormStats {
    /// `pixels` are flat indices of the training set.
    pub fn fit(scene: &Scene, pixels: &[usize]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Split(
                "normalization needs at least one training pixel".into(),
            ));
        }
        let bands = scene.bands();
        let mut hsi_min = vec![f64::INFINITY; bands];
        let mut hsi_max = vec![f64::NEG_INFINITY; bands];
        let mut lidar_min = f64::INFINITY;
        let mut lidar_max = f64::NEG_INFINITY;
        let n = scene.height() * scene.width();
        for &p in pixels {
            if p >= n {
                return Err(Error::Shape(format!(
                    "pixel index {p} outside scene of {n} pixels"
                )));
            }
            for (b, &v) in scene.hsi.spectrum(p).iter().enumerate() {
                hsi_min[b] = hsi_min[b].min(v);
                hsi_max[b] = hsi_max[b].max(v);
            }
            let l = scene.lidar.values()[p];
            lidar_min = lidar_min.min(l);
            lidar_max = lidar_max.max(l);
        }
        Ok(NormStats {
            hsi_min,
            hsi_max,
            lidar_min,
            lidar_max,
        })
    }

    pub fn bands(&self) -> usize {
        self.hsi_min.len()
    }

    /// Min-max scales every channel; values outside the training range clamp
    /// to `[0, 1]` and constant channels map to 0.
    pub fn apply(&self, scene: &Scene) -> Result<Scene> {
        let bands = scene.bands();
        if bands != self.bands() {
            return Err(Error::Shape(format!(
                "normalization fitted on {} bands, scene has {bands}",
                self.bands()
            )));
        }
        let hsi: Vec<f64> = scene
            .hsi
            .values()
            .chunks_exact(bands)
            .flat_map(|px| {
                px.iter()
                    .enumerate()
                    .map(|(b, &v)| scale(v, self.hsi_min[b], self.hsi_max[b]))
            })
            .collect();
        let lidar = scene
            .lidar
            .values()
            .iter()
            .map(|&v| scale(v, self.lidar_min, self.lidar_max))
            .collect();
        Scene::new(
            scene.name.clone(),
            HsiCube::new(scene.height(), scene.width(), bands, hsi)?,
            LidarMap::new(scene.height(), scene.width(), lidar)?,
            scene.labels.clone(),
        )
    }
}
