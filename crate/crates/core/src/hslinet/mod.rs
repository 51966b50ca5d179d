//! Dual-stream band-order fusion network.
//!
//! Each stream sees every pixel of a `p × p` patch as a spectral sequence
//! (its own band order, optionally with LiDAR pseudo-bands), runs two
//! same-padded Conv1D + SiLU blocks along the spectral axis, projects to
//! `d_h`, averages over the patch pixels, and refines with an FC + SiLU
//! head. Stream descriptors are summed and mapped to class logits by a
//! shared FC layer.

mod checkpoint;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, SplitRecord, FORMAT_VERSION, MAGIC,
};

use crate::band_order::BandOrderSpec;
use crate::data::Patch;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const DEFAULT_FILTERS: usize = 16;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Bands in the source cube.
    pub bands: usize,
    /// One order per stream; one or two streams.
    pub orders: Vec<BandOrderSpec>,
    pub patch: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Experimental: project each pixel's sequence to `d_h` before the
    /// convolutions and average the conv channels afterwards.
    pub project_first: bool,
}

impl ModelConfig {
    pub fn new(bands: usize, orders: Vec<BandOrderSpec>, patch: usize, classes: usize) -> Self {
        ModelConfig {
            bands,
            orders,
            patch,
            filters: DEFAULT_FILTERS,
            kernel: DEFAULT_KERNEL,
            hidden: DEFAULT_HIDDEN,
            classes,
            project_first: false,
        }
    }

    pub fn num_streams(&self) -> usize {
        self.orders.len()
    }

    pub fn pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.orders.len()) {
            return Err(Error::Config(format!(
                "a model has 1 or 2 streams, got {}",
                self.orders.len()
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.patch.is_multiple_of(2) || self.patch == 0 {
            return Err(Error::Config(format!(
                "patch size must be odd, got {}",
                self.patch
            )));
        }
        if self.filters == 0 || self.hidden == 0 || self.bands == 0 {
            return Err(Error::Config(
                "filters, hidden width and bands must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        for o in &self.orders {
            if o.bands != self.bands {
                return Err(Error::Config(format!(
                    "order {} built for {} bands, model has {}",
                    o.label(),
                    o.bands,
                    self.bands
                )));
            }
            if o.permutation.iter().any(|&b| b >= self.bands) || o.permutation.is_empty() {
                return Err(Error::Config(format!(
                    "order {} has an invalid permutation",
                    o.label()
                )));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        self.orders
            .iter()
            .map(BandOrderSpec::label)
            .collect::<Vec<_>>()
            .join("+")
    }

    fn projection_in(&self, seq_len: usize) -> usize {
        if self.project_first {
            seq_len
        } else {
            seq_len * self.filters
        }
    }
}

/// Learnable weights of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl StreamParams {
    const NAMES: [&'static str; 8] = [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "proj.weight",
        "proj.bias",
        "head.weight",
        "head.bias",
    ];

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.proj_w,
            &self.proj_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    fn shapes(cfg: &ModelConfig, seq_len: usize) -> [Vec<usize>; 8] {
        let (f, k, d) = (cfg.filters, cfg.kernel, cfg.hidden);
        [
            vec![f, 1, k],
            vec![f],
            vec![f, f, k],
            vec![f],
            vec![cfg.projection_in(seq_len), d],
            vec![d],
            vec![d, d],
            vec![d],
        ]
    }

    fn from_tensors(mut t: Vec<Tensor>) -> Self {
        assert_eq!(t.len(), 8);
        let mut it = t.drain(..);
        let mut next = || it.next().expect("eight tensors");
        StreamParams {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            proj_w: next(),
            proj_b: next(),
            head_w: next(),
            head_b: next(),
        }
    }
}

/// All learnable weights: per-stream blocks then the shared fusion head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub streams: Vec<StreamParams>,
    pub fusion_w: Tensor,
    pub fusion_b: Tensor,
}

impl ModelParams {
    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.streams.iter().flat_map(|s| s.tensors()).collect();
        v.push(&self.fusion_w);
        v.push(&self.fusion_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .streams
            .iter_mut()
            .flat_map(|s| s.tensors_mut())
            .collect();
        v.push(&mut self.fusion_w);
        v.push(&mut self.fusion_b);
        v
    }

    /// Names parallel to [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.streams.len())
            .flat_map(|s| {
                StreamParams::NAMES
                    .iter()
                    .map(move |n| format!("stream{s}.{n}"))
            })
            .collect();
        v.push("fusion.weight".into());
        v.push("fusion.bias".into());
        v
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Expected shapes in serialization order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = cfg
            .orders
            .iter()
            .flat_map(|o| StreamParams::shapes(cfg, o.sequence_len()))
            .collect();
        v.push(vec![cfg.hidden, cfg.classes]);
        v.push(vec![cfg.classes]);
        v
    }

    /// Rebuilds from tensors in serialization order, checking shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {i} has shape {:?}, config implies {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let streams = (0..cfg.num_streams())
            .map(|_| StreamParams::from_tensors(it.by_ref().take(8).collect()))
            .collect();
        let fusion_w = it.next().expect("checked length");
        let fusion_b = it.next().expect("checked length");
        Ok(ModelParams {
            streams,
            fusion_w,
            fusion_b,
        })
    }

    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let t = Self::shapes(cfg).iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_tensors(cfg, t).expect("shapes from config")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [c_out, c_in, k] => (c_in * k, c_out * k),
        [d_in, d_out] => (d_in, d_out),
        _ => unreachable!("weights are rank 2 or 3"),
    }
}

/// Glorot-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// zero biases. Deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, tag::INIT, 0);
    let tensors = ModelParams::shapes(cfg)
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let (fi, fo) = fans(&shape);
            let a = (6.0 / (fi + fo) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape, data).expect("shape and data agree")
        })
        .collect();
    ModelParams::from_tensors(cfg, tensors)
}

/// Network input: for every stream, the ordered sequences of all `N = p²`
/// patch pixels of every sample, shaped `[batch · N, 1, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub batch: usize,
    pub pixels: usize,
    pub streams: Vec<Tensor>,
    /// Class per sample, 1..=K; 0 when unknown.
    pub labels: Vec<u16>,
}

impl SampleBatch {
    pub fn from_patches(patches: &[&Patch], orders: &[BandOrderSpec]) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Empty("sample batch needs at least one patch".into()))?;
        let pixels = first.size * first.size;
        let streams = orders
            .iter()
            .map(|o| {
                let l = o.sequence_len();
                let mut data = Vec::with_capacity(patches.len() * pixels * l);
                for p in patches {
                    if p.size * p.size != pixels {
                        return Err(Error::Shape(
                            "patches in a batch must share one size".into(),
                        ));
                    }
                    for px in 0..pixels {
                        o.apply_into(p.spectrum(px), p.lidar[px], &mut data)?;
                    }
                }
                Tensor::new(vec![patches.len() * pixels, 1, l], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleBatch {
            batch: patches.len(),
            pixels,
            streams,
            labels: patches.iter().map(|p| p.label).collect(),
        })
    }

    /// One-hot targets `[batch, K]`.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        let mut data = vec![0.0; self.batch * classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 || usize::from(l) > classes {
                return Err(Error::Data(format!(
                    "sample {i} has label {l}, expected 1..={classes}"
                )));
            }
            data[i * classes + usize::from(l) - 1] = 1.0;
        }
        Tensor::new(vec![self.batch, classes], data)
    }
}

struct StreamVars {
    w: [Var; 8],
}

struct ParamVars {
    streams: Vec<StreamVars>,
    fusion_w: Var,
    fusion_b: Var,
}

fn register(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    let streams = params
        .streams
        .iter()
        .map(|s| StreamVars {
            w: s.tensors().map(|t| tape.leaf(t.clone())),
        })
        .collect();
    ParamVars {
        streams,
        fusion_w: tape.leaf(params.fusion_w.clone()),
        fusion_b: tape.leaf(params.fusion_b.clone()),
    }
}

fn stream_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    sv: &StreamVars,
    input: Var,
    batch: usize,
    pixels: usize,
) -> Result<Var> {
    let [c1w, c1b, c2w, c2b, pw, pb, hw, hb] = sv.w;
    let shape = tape.value(input).shape().to_vec();
    let [rows, one, len] = shape[..] else {
        return Err(Error::Shape(format!(
            "stream input must be [rows, 1, L], got {shape:?}"
        )));
    };
    if one != 1 || rows != batch * pixels {
        return Err(Error::Shape(format!(
            "stream input {shape:?} does not hold {batch} x {pixels} single-channel sequences"
        )));
    }
    let expected_in = tape.value(pw).shape()[0];
    if cfg.projection_in(len) != expected_in {
        return Err(Error::Shape(format!(
            "sequence length {len} does not match projection input {expected_in}"
        )));
    }
    let f = cfg.filters;
    let pooled = if cfg.project_first {
        let flat = tape.reshape(input, vec![rows, len])?;
        let proj = tape.linear(flat, pw, pb)?;
        let seq = tape.reshape(proj, vec![rows, 1, cfg.hidden])?;
        let a = tape.conv1d_same(seq, c1w, c1b)?;
        let a = tape.silu(a);
        let z = tape.conv1d_same(a, c2w, c2b)?;
        let z = tape.silu(z);
        let per_pixel = tape.mean_pool_rows(z)?;
        let grouped = tape.reshape(per_pixel, vec![batch, pixels, cfg.hidden])?;
        tape.mean_pool_rows(grouped)?
    } else {
        let a = tape.conv1d_same(input, c1w, c1b)?;
        let a = tape.silu(a);
        let z = tape.conv1d_same(a, c2w, c2b)?;
        let z = tape.silu(z);
        // The projection is affine, so averaging the flattened features
        // before projecting equals averaging the projected pixels.
        let grouped = tape.reshape(z, vec![batch, pixels, f * len])?;
        let mean = tape.mean_pool_rows(grouped)?;
        tape.linear(mean, pw, pb)?
    };
    let h = tape.linear(pooled, hw, hb)?;
    Ok(tape.silu(h))
}

fn logits_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    batch: &SampleBatch,
) -> Result<Var> {
    if batch.streams.len() != cfg.num_streams() {
        return Err(Error::Shape(format!(
            "batch carries {} streams, model has {}",
            batch.streams.len(),
            cfg.num_streams()
        )));
    }
    if batch.pixels != cfg.pixels() {
        return Err(Error::Shape(format!(
            "batch has {} pixels per sample, model expects {}",
            batch.pixels,
            cfg.pixels()
        )));
    }
    let mut fused: Option<Var> = None;
    for (sv, input) in pv.streams.iter().zip(&batch.streams) {
        let x = tape.leaf(input.clone());
        let h = stream_graph(tape, cfg, sv, x, batch.batch, batch.pixels)?;
        fused = Some(match fused {
            None => h,
            Some(prev) => tape.add(prev, h)?,
        });
    }
    let fused = fused.expect("at least one stream");
    tape.linear(fused, pv.fusion_w, pv.fusion_b)
}

/// Logits `[batch, K]`.
pub fn forward(cfg: &ModelConfig, params: &ModelParams, batch: &SampleBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = register(&mut tape, params);
    let logits = logits_graph(&mut tape, cfg, &pv, batch)?;
    Ok(tape.value(logits).clone())
}

/// Stream descriptor `h_s [d_h]` for one sample's `[N, 1, L]` sequences.
pub fn stream_forward(
    cfg: &ModelConfig,
    stream: &StreamParams,
    sequences: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = StreamVars {
        w: stream.tensors().map(|t| tape.leaf(t.clone())),
    };
    let rows = sequences.shape()[0];
    let x = tape.leaf(sequences.clone());
    let h = stream_graph(&mut tape, cfg, &sv, x, 1, rows)?;
    tape.value(h).clone().reshape(vec![cfg.hidden])
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: ModelParams,
    pub logits: Tensor,
}

/// Mean cross-entropy over the batch and its gradient for every parameter.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &SampleBatch,
) -> Result<LossEval> {
    let targets = batch.one_hot(cfg.classes)?;
    let mut tape = Tape::new();
    let pv = register(&mut tape, params);
    let logits = logits_graph(&mut tape, cfg, &pv, batch)?;
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    let mut g = tape.backward(loss)?;
    let grads = collect_grads(cfg, &pv, &mut g)?;
    Ok(LossEval {
        loss: tape.value(loss).data()[0],
        grads,
        logits: tape.value(logits).clone(),
    })
}

fn collect_grads(cfg: &ModelConfig, pv: &ParamVars, g: &mut Gradients) -> Result<ModelParams> {
    let mut tensors: Vec<Tensor> = pv
        .streams
        .iter()
        .flat_map(|s| s.w.to_vec())
        .map(|v| g.take(v))
        .collect();
    tensors.push(g.take(pv.fusion_w));
    tensors.push(g.take(pv.fusion_b));
    ModelParams::from_tensors(cfg, tensors)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class (1..=K) for every row of a logits matrix.
pub fn classes_from_logits(logits: &Tensor) -> Vec<u16> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| (argmax(row) + 1) as u16)
        .collect()
}

/// Predicted class (1..=K) for a single patch.
pub fn predict(cfg: &ModelConfig, params: &ModelParams, patch: &Patch) -> Result<u16> {
    let batch = SampleBatch::from_patches(&[patch], &cfg.orders)?;
    let logits = forward(cfg, params, &batch)?;
    Ok(classes_from_logits(&logits)[0])
}
