//! Co-registered HSI / LiDAR / label scenes and their on-disk container.
//!
//! A scene directory holds `meta.json`, `hsi.bin` (float32 LE, BIP),
//! `lidar.bin` (float32 LE, row-major) and `labels.bin` (uint16 LE,
//! row-major, 0 = unlabeled). Values are kept as `f64` in memory but always
//! carry float32 precision so that a write/read cycle is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const HSI_FILE: &str = "hsi.bin";
pub const LIDAR_FILE: &str = "lidar.bin";
pub const LABELS_FILE: &str = "labels.bin";

/// Hyperspectral cube, `height × width × bands`, pixel-major (BIP).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube extents must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite HSI value at index {i}")));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Spectrum of the pixel at flat index `r * width + c`.
    pub fn spectrum(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.bands..][..self.bands]
    }
}

/// Rasterized elevation map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LidarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::Shape(format!(
                "lidar map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite LiDAR value at index {i}")));
        }
        Ok(LidarMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Ground truth, row-major; 0 = unlabeled, 1..=K = classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| usize::from(l) > classes)
        {
            return Err(Error::Data(format!(
                "label {l} at pixel {i} exceeds class count {classes}"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    /// Flat indices of labeled pixels, row-major.
    pub fn labeled_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i)
    }
}

/// The co-registered scene triple plus its name.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub hsi: HsiCube,
    pub lidar: LidarMap,
    pub labels: LabelMap,
}

impl Scene {
    pub fn new(
        name: impl Into<String>,
        hsi: HsiCube,
        lidar: LidarMap,
        labels: LabelMap,
    ) -> Result<Self> {
        let dims = (hsi.height(), hsi.width());
        if (lidar.height(), lidar.width()) != dims || (labels.height(), labels.width()) != dims {
            return Err(Error::Shape(format!(
                "scene layers disagree: hsi {:?}, lidar {:?}, labels {:?}",
                dims,
                (lidar.height(), lidar.width()),
                (labels.height(), labels.width())
            )));
        }
        Ok(Scene {
            name: name.into(),
            hsi,
            lidar,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.hsi.height()
    }

    pub fn width(&self) -> usize {
        self.hsi.width()
    }

    pub fn bands(&self) -> usize {
        self.hsi.bands()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            name: self.name.clone(),
            height: self.height(),
            width: self.width(),
            bands: self.bands(),
            classes: self.classes(),
            dtype: "f32le".into(),
            layout: "bip".into(),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub dtype: String,
    pub layout: String,
}

/// Rounds to the nearest float32, the precision every stored value carries.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn read_file(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

pub fn read_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if meta.dtype != "f32le" || meta.layout != "bip" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype/layout {}/{} (expected f32le/bip)",
            path.display(),
            meta.dtype,
            meta.layout
        )));
    }
    if meta.height == 0 || meta.width == 0 || meta.bands == 0 || meta.classes == 0 {
        return Err(Error::Format(format!(
            "{}: dimensions and class count must be positive",
            path.display()
        )));
    }
    Ok(meta)
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let (h, w, c) = (meta.height, meta.width, meta.bands);

    let hsi = decode_f32(&read_file(&dir.join(HSI_FILE), h * w * c * 4)?);
    let lidar = decode_f32(&read_file(&dir.join(LIDAR_FILE), h * w * 4)?);
    let labels: Vec<u16> = read_file(&dir.join(LABELS_FILE), h * w * 2)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    let hsi = HsiCube::new(h, w, c, hsi)?;
    let lidar = LidarMap::new(h, w, lidar)?;
    let labels = LabelMap::new(h, w, meta.classes, labels)?;
    Scene::new(meta.name, hsi, lidar, labels)
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub(crate) fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))
}

/// Atomically replaces the file at `path`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    write_atomic(dir, &name.to_string_lossy(), bytes)
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&scene.meta()).map_err(|e| Error::json(dir, e))?;
    let labels: Vec<u8> = scene
        .labels
        .labels()
        .iter()
        .flat_map(|l| l.to_le_bytes())
        .collect();
    write_atomic(dir, HSI_FILE, &encode_f32(scene.hsi.values()))?;
    write_atomic(dir, LIDAR_FILE, &encode_f32(scene.lidar.values()))?;
    write_atomic(dir, LABELS_FILE, &labels)?;
    write_atomic(dir, META_FILE, meta.as_bytes())
}
