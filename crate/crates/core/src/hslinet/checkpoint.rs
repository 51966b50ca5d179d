//! Binary model file.
//!
//! ```text
//! "HSLN" | version u32 | config | parameters (f32, serialization order) | trailer
//! config  = bands u32, streams u32,
//!           per stream: order u8, lidar u8, len u32, permutation u32 * len,
//!           patch u32, filters u32, kernel u32, hidden u32, classes u32,
//!           project_first u8
//! trailer = has_norm u8 [band mins f32 * C, band maxs f32 * C, lidar min f32, lidar max f32]
//!           has_split u8 [seed u64, train_per_class u32]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::band_order::{BandOrderSpec, OrderId};
use crate::data::{write_file, NormStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSLN";
pub const FORMAT_VERSION: u32 = 1;

/// Split parameters the model was trained with; `make_split` regenerates
/// the exact partition from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub norm: Option<NormStats>,
    pub split: Option<SplitRecord>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "model file truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v}"))),
        }
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = &ckpt.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.u32(cfg.bands)?;
    w.u32(cfg.orders.len())?;
    for o in &cfg.orders {
        w.u8(o.id.code());
        w.u8(u8::from(o.lidar_injection));
        w.u32(o.permutation.len())?;
        for &b in &o.permutation {
            w.u32(b)?;
        }
    }
    for v in [cfg.patch, cfg.filters, cfg.kernel, cfg.hidden, cfg.classes] {
        w.u32(v)?;
    }
    w.u8(u8::from(cfg.project_first));
    for t in ckpt.params.tensors() {
        for &v in t.data() {
            w.f32(v);
        }
    }
    match &ckpt.norm {
        Some(n) => {
            w.u8(1);
            n.hsi_min.iter().chain(&n.hsi_max).for_each(|&v| w.f32(v));
            w.f32(n.lidar_min);
            w.f32(n.lidar_max);
        }
        None => w.u8(0),
    }
    match ckpt.split {
        Some(s) => {
            w.u8(1);
            w.0.extend_from_slice(&s.seed.to_le_bytes());
            w.u32(s.train_per_class)?;
        }
        None => w.u8(0),
    }
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| Error::Format("model file shorter than its magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let bands = r.u32()?;
    let n_streams = r.u32()?;
    if !(1..=2).contains(&n_streams) {
        return Err(Error::Format(format!("invalid stream count {n_streams}")));
    }
    let mut orders = Vec::with_capacity(n_streams);
    for _ in 0..n_streams {
        let id = OrderId::from_code(r.u8()?)?;
        let lidar_injection = r.flag()?;
        let len = r.u32()?;
        if len == 0 || len > bands {
            return Err(Error::Format(format!(
                "order length {len} invalid for {bands} bands"
            )));
        }
        let permutation = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        orders.push(BandOrderSpec {
            id,
            bands,
            permutation,
            lidar_injection,
        });
    }
    let config = ModelConfig {
        bands,
        orders,
        patch: r.u32()?,
        filters: r.u32()?,
        kernel: r.u32()?,
        hidden: r.u32()?,
        classes: r.u32()?,
        project_first: r.flag()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    let tensors = ModelParams::shapes(&config)
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, r.f32s(n)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(&config, tensors)?;
    let norm = if r.flag()? {
        Some(NormStats {
            hsi_min: r.f32s(bands)?,
            hsi_max: r.f32s(bands)?,
            lidar_min: r.f32()?,
            lidar_max: r.f32()?,
        })
    } else {
        None
    };
    let split = if r.flag()? {
        Some(SplitRecord {
            seed: r.u64()?,
            train_per_class: r.u32()?,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        norm,
        split,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl Checkpoint {
    /// Fails with a shape error when the model cannot consume a scene with
    /// `bands` bands and `classes` classes.
    pub fn check_scene(&self, bands: usize, classes: usize) -> Result<()> {
        if self.config.bands != bands {
            return Err(Error::Shape(format!(
                "model expects {} bands, scene has {bands}",
                self.config.bands
            )));
        }
        if self.config.classes != classes {
            return Err(Error::Shape(format!(
                "model predicts {} classes, scene has {classes}",
                self.config.classes
            )));
        }
        Ok(())
    }
}
