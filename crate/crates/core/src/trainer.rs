//! Mini-batch Adam training of the cross-entropy objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use crate::hslinet::{load_checkpoint, save_checkpoint, Checkpoint, SplitRecord};

use crate::data::{extract_patch, write_file, NormStats, Patch, PatchConfig, Scene, SplitSpec};
use crate::error::{Error, Result};
use crate::hslinet::{
    classes_from_logits, forward, init_params, loss_and_grads, ModelConfig, ModelParams,
    SampleBatch,
};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// L2 penalty added to gradients; 0 disables.
    pub weight_decay: f64,
    /// Multiplicative learning-rate factor applied after every epoch; 1 disables.
    pub lr_decay: f64,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    /// Where to write the last finite parameters if training diverges.
    pub divergence_dump: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            weight_decay: 0.0,
            lr_decay: 1.0,
            early_stop_patience: None,
            divergence_dump: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config(
                "eps and lr decay must be positive, weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let names = params.names();
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.m.len() != param_tensors.len() {
        return Err(Error::Shape(
            "parameters, gradients and optimizer state disagree".into(),
        ));
    }
    for (i, g) in grad_tensors.iter().enumerate() {
        if g.shape() != param_tensors[i].shape() {
            return Err(Error::Shape(format!(
                "gradient shape mismatch for {}",
                names[i]
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in {}[{j}]",
                names[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in param_tensors.iter_mut().enumerate() {
        let g = grad_tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + cfg.weight_decay * *theta;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_oa: f64,
}

/// CSV `epoch,mean_loss,train_oa`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,train_oa\n");
    for e in log {
        let _ = writeln!(s, "{},{:.17e},{:.17e}", e.epoch, e.mean_loss, e.train_oa);
    }
    s
}

/// Scene normalized with training statistics, plus the training patches.
pub struct Prepared {
    pub scene: Scene,
    pub norm: NormStats,
    pub patch: PatchConfig,
    pub train: Vec<Patch>,
}

pub fn prepare(scene: &Scene, split: &SplitSpec, patch: usize) -> Result<Prepared> {
    let train_px: Vec<usize> = split.train_pixels().into_iter().map(|(p, _)| p).collect();
    if train_px.is_empty() {
        return Err(Error::Split("training set is empty".into()));
    }
    let norm = NormStats::fit(scene, &train_px)?;
    let scene = norm.apply(scene)?;
    let patch = PatchConfig::new(patch, scene.height(), scene.width())?;
    let w = scene.width();
    let train = train_px
        .iter()
        .map(|&p| extract_patch(&scene, p / w, p % w, patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        scene,
        norm,
        patch,
        train,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub norm: NormStats,
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) on the training
/// pixels of `split`.
pub fn train(
    scene: &Scene,
    split: &SplitSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if model.bands != scene.bands() {
        return Err(Error::Shape(format!(
            "model expects {} bands, scene has {}",
            model.bands,
            scene.bands()
        )));
    }
    if model.classes != scene.classes() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, scene has {}",
            model.classes,
            scene.classes()
        )));
    }
    let prepared = prepare(scene, split, model.patch)?;
    let params = init_params(model, cfg.seed)?;
    let (params, log) = train_prepared(&prepared.train, params, model, cfg)?;
    Ok(TrainOutcome {
        params,
        log,
        norm: prepared.norm,
    })
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, tag::SHUFFLE, epoch as u64));
    }
    order
}

pub fn train_prepared(
    train: &[Patch],
    mut params: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::Split("training set is empty".into()));
    }
    let mut state = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch, cfg.shuffle);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = SampleBatch::from_patches(&patches, &model.orders)?;
            let ev = loss_and_grads(model, &params, &batch)?;
            if !ev.loss.is_finite() {
                return Err(diverged(
                    cfg,
                    model,
                    &params,
                    epoch,
                    bi,
                    format!("loss is {}", ev.loss),
                ));
            }
            loss_sum += ev.loss * chunk.len() as f64;
            correct += classes_from_logits(&ev.logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, t)| p == t)
                .count();
            if let Err(e) = adam_step(&mut params, &ev.grads, &mut state, cfg, lr) {
                return Err(match e {
                    Error::Training(m) => diverged(cfg, model, &params, epoch, bi, m),
                    other => other,
                });
            }
        }
        let mean_loss = loss_sum / train.len() as f64;
        log.push(EpochLog {
            epoch,
            mean_loss,
            train_oa: correct as f64 / train.len() as f64,
        });
        lr *= cfg.lr_decay;
        if let Some(patience) = cfg.early_stop_patience {
            if mean_loss < best {
                best = mean_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok((params, log))
}

fn diverged(
    cfg: &TrainConfig,
    model: &ModelConfig,
    params: &ModelParams,
    epoch: usize,
    batch: usize,
    what: String,
) -> Error {
    let mut msg = format!("diverged at epoch {epoch}, batch {batch}: {what}");
    if let Some(path) = &cfg.divergence_dump {
        let ckpt = Checkpoint {
            config: model.clone(),
            params: params.clone(),
            norm: None,
            split: None,
        };
        match save_checkpoint(&ckpt, path) {
            Ok(()) => {
                let _ = write!(msg, "; last parameters written to {}", path.display());
            }
            Err(e) => {
                let _ = write!(msg, "; state dump failed: {e}");
            }
        }
    }
    Error::Training(msg)
}

/// Predicted class for each flat pixel index of an already-normalized scene.
pub fn predict_pixels(
    model: &ModelConfig,
    params: &ModelParams,
    scene: &Scene,
    pixels: &[usize],
    chunk: usize,
) -> Result<Vec<u16>> {
    let patch = PatchConfig::new(model.patch, scene.height(), scene.width())?;
    let w = scene.width();
    let mut out = Vec::with_capacity(pixels.len());
    for group in pixels.chunks(chunk.max(1)) {
        let patches = group
            .iter()
            .map(|&p| extract_patch(scene, p / w, p % w, patch))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let batch = SampleBatch::from_patches(&refs, &model.orders)?;
        out.extend(classes_from_logits(&forward(model, params, &batch)?));
    }
    Ok(out)
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_file(path, log_csv(log).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band_order::{build_order, OrderId};
    use crate::data::{make_split, HsiCube, LabelMap, LidarMap};

    fn scalar_model() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            filters: 1,
            kernel: 1,
            hidden: 1,
            ..ModelConfig::new(1, vec![build_order(OrderId::Db1, 1, None).unwrap()], 1, 2)
        };
        (cfg.clone(), ModelParams::zeros_like(&cfg))
    }

    fn fill(p: &mut ModelParams, v: f64) {
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let (_, mut params) = scalar_model();
        let (_, mut grads) = scalar_model();
        fill(&mut grads, 2.0);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, &cfg, cfg.lr).unwrap();
        let expect = -1e-5 * 2.0 / (2.0 + 1e-8);
        for t in params.tensors() {
            for &v in t.data() {
                assert!((v - expect).abs() < 1e-20, "{v} vs {expect}");
                assert!(v.abs() <= cfg.lr * (1.0 + 1e-8));
            }
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (cfg_m, _) = scalar_model();
        let mut params = init_params(&cfg_m, 3).unwrap();
        let before = params.clone();
        let grads = ModelParams::zeros_like(&cfg_m);
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, &cfg, cfg.lr).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (_, mut params) = scalar_model();
        let (_, mut grads) = scalar_model();
        grads.streams[0].proj_w.data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&params);
        let err =
            adam_step(&mut params, &grads, &mut st, &TrainConfig::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("stream0.proj.weight"), "{err}");
    }

    #[test]
    fn equal_gradients_update_identically() {
        let (_, mut params) = scalar_model();
        let (_, mut grads) = scalar_model();
        fill(&mut grads, -0.37);
        let mut st = AdamState::new(&params);
        let cfg = TrainConfig::default();
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut st, &cfg, 1e-2).unwrap();
        }
        let first = params.tensors()[0].data()[0];
        assert!(params
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == first)));
    }

    #[test]
    fn epoch_order_is_pure() {
        assert_eq!(epoch_order(50, 3, 7, true), epoch_order(50, 3, 7, true));
        assert_ne!(epoch_order(50, 3, 7, true), epoch_order(50, 3, 8, true));
        assert_eq!(epoch_order(5, 3, 7, false), vec![0, 1, 2, 3, 4]);
    }

    /// 8x8 scene, left half class 1 (low spectrum, low LiDAR), right half class 2.
    fn separable_scene() -> Scene {
        let (h, w, c) = (8, 8, 5);
        let mut hsi = Vec::new();
        let mut lidar = Vec::new();
        let mut labels = Vec::new();
        for r in 0..h {
            for col in 0..w {
                let cls = if col < w / 2 { 1 } else { 2 };
                let jitter = ((r * 7 + col * 3) % 5) as f64 * 0.01;
                for b in 0..c {
                    let base = if cls == 1 {
                        0.2 + 0.05 * b as f64
                    } else {
                        0.8 - 0.05 * b as f64
                    };
                    hsi.push(base + jitter);
                }
                lidar.push(if cls == 1 { 0.1 } else { 0.9 } + jitter);
                labels.push(cls);
            }
        }
        Scene::new(
            "sep",
            HsiCube::new(h, w, c, hsi).unwrap(),
            LidarMap::new(h, w, lidar).unwrap(),
            LabelMap::new(h, w, 2, labels).unwrap(),
        )
        .unwrap()
    }

    fn small_model(scene: &Scene) -> ModelConfig {
        ModelConfig {
            filters: 4,
            hidden: 8,
            ..ModelConfig::new(
                scene.bands(),
                vec![build_order(OrderId::Db1, scene.bands(), None)
                    .unwrap()
                    .with_lidar(true)],
                3,
                2,
            )
        }
    }

    #[test]
    fn separable_scene_beats_uniform_baseline() {
        let scene = separable_scene();
        let split = make_split(&scene.labels, 6, 1).unwrap();
        let model = small_model(&scene);
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train(&scene, &split, &model, &cfg).unwrap();
        assert_eq!(out.log.len(), 100);
        let last = out.log.last().unwrap().mean_loss;
        assert!(last < 2f64.ln(), "final loss {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let scene = separable_scene();
        let split = make_split(&scene.labels, 4, 1).unwrap();
        let model = small_model(&scene);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&scene, &split, &model, &cfg).unwrap();
        assert_eq!(out.params, init_params(&model, 5).unwrap());
    }

    #[test]
    fn same_seed_same_log() {
        let scene = separable_scene();
        let split = make_split(&scene.labels, 4, 1).unwrap();
        let model = small_model(&scene);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            lr: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&scene, &split, &model, &cfg).unwrap();
        let b = train(&scene, &split, &model, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert!(log_csv(&a.log).starts_with("epoch,mean_loss,train_oa\n0,"));
    }

    #[test]
    fn initial_loss_near_uniform() {
        let scene = separable_scene();
        let split = make_split(&scene.labels, 6, 4).unwrap();
        let model = small_model(&scene);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&scene, &split, &model, &cfg).unwrap();
        assert!((out.log[0].mean_loss - 2f64.ln()).abs() <= 0.5);
    }

    #[test]
    fn divergence_aborts_with_diagnostics_and_dump() {
        let scene = separable_scene();
        let split = make_split(&scene.labels, 4, 1).unwrap();
        let model = small_model(&scene);
        let prepared = prepare(&scene, &split, 3).unwrap();
        let mut params = init_params(&model, 0).unwrap();
        params.fusion_w.data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("dump.bin");
        let cfg = TrainConfig {
            epochs: 1,
            divergence_dump: Some(dump.clone()),
            ..TrainConfig::default()
        };
        let err = train_prepared(&prepared.train, params, &model, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Training(_)));
        assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
        assert!(dump.exists());
    }

    #[test]
    fn empty_split_and_mismatched_scene() {
        let scene = separable_scene();
        let mut split = make_split(&scene.labels, 4, 1).unwrap();
        let model = small_model(&scene);
        let cfg = TrainConfig::default();
        let mut wrong = model.clone();
        wrong.bands = 4;
        assert!(matches!(
            train(&scene, &split, &wrong, &cfg),
            Err(Error::Shape(_)) | Err(Error::Config(_))
        ));
        split.train.clear();
        assert!(matches!(
            train(&scene, &split, &model, &cfg),
            Err(Error::Split(_))
        ));
    }
}
