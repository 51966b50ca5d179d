use super::scene::Scene;
use crate::error::{Error, Result};

/// Square neighbourhood size; borders are filled by symmetric reflection
/// that repeats the edge pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    size: usize,
}

impl PatchConfig {
    pub fn new(size: usize, height: usize, width: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size must be odd, got {size}")));
        }
        if size > height.min(width) {
            return Err(Error::Config(format!(
                "patch size {size} exceeds scene extent {height}x{width}"
            )));
        }
        Ok(PatchConfig { size })
    }

    pub fn size(self) -> usize {
        self.size
    }

    pub fn pixels(self) -> usize {
        self.size * self.size
    }
}

/// `p × p × C` spectra (pixel-major), `p × p` LiDAR values and the center label.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub hsi: Vec<f64>,
    pub lidar: Vec<f64>,
    pub label: u16,
}

impl Patch {
    pub fn spectrum(&self, pixel: usize) -> &[f64] {
        &self.hsi[pixel * self.bands..][..self.bands]
    }
}

/// Symmetric reflection including the edge: -1 -> 0, n -> n - 1.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Row and column source indices used by a patch centred at `(r, c)`.
pub fn patch_indices(center: usize, size: usize, extent: usize) -> Vec<usize> {
    let half = (size / 2) as isize;
    (-half..=half)
        .map(|d| reflect_index(center as isize + d, extent))
        .collect()
}

pub fn extract_patch(scene: &Scene, r: usize, c: usize, cfg: PatchConfig) -> Result<Patch> {
    let (h, w, bands) = (scene.height(), scene.width(), scene.bands());
    if r >= h || c >= w {
        return Err(Error::Shape(format!(
            "patch center ({r}, {c}) outside {h}x{w} scene"
        )));
    }
    let rows = patch_indices(r, cfg.size, h);
    let cols = patch_indices(c, cfg.size, w);
    let mut hsi = Vec::with_capacity(cfg.pixels() * bands);
    let mut lidar = Vec::with_capacity(cfg.pixels());
    for &rr in &rows {
        for &cc in &cols {
            let p = rr * w + cc;
            hsi.extend_from_slice(scene.hsi.spectrum(p));
            lidar.push(scene.lidar.values()[p]);
        }
    }
    Ok(Patch {
        size: cfg.size,
        bands,
        hsi,
        lidar,
        label: scene.labels.get(r, c),
    })
}
