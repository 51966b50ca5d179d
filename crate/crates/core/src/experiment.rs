//! Train-and-evaluate protocols: single configurations, the ten-column
//! band-order grid, and the patch-size sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::band_order::{grid_configs, rank_bands_fisher, BandRanking, ConfigId};
use crate::data::{NormStats, Scene, SplitSpec};
use crate::error::{Error, Result};
use crate::hslinet::{ModelConfig, ModelParams, DEFAULT_FILTERS, DEFAULT_HIDDEN, DEFAULT_KERNEL};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::trainer::{predict_pixels, train, EpochLog, TrainConfig};

const EVAL_CHUNK: usize = 128;

/// Architecture knobs shared by every configuration of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub project_first: bool,
    /// Bands kept by importance orders; `None` keeps all.
    pub top_k: Option<usize>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            filters: DEFAULT_FILTERS,
            kernel: DEFAULT_KERNEL,
            hidden: DEFAULT_HIDDEN,
            project_first: false,
            top_k: None,
        }
    }
}

impl ModelOptions {
    pub fn model_config(
        &self,
        id: &ConfigId,
        scene: &Scene,
        ranking: Option<&BandRanking>,
        patch: usize,
    ) -> Result<ModelConfig> {
        let bands = scene.bands();
        let orders = id.build(bands, ranking, self.top_k.unwrap_or(bands))?;
        let cfg = ModelConfig {
            bands,
            orders,
            patch,
            filters: self.filters,
            kernel: self.kernel,
            hidden: self.hidden,
            classes: scene.classes(),
            project_first: self.project_first,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub norm: NormStats,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
}

/// Confusion matrix of `model` over `(pixel, class)` pairs of a scene that
/// has already been normalized.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    scene: &Scene,
    pixels: &[(usize, u16)],
) -> Result<ConfusionMatrix> {
    let idx: Vec<usize> = pixels.iter().map(|&(p, _)| p).collect();
    let pred = predict_pixels(model, params, scene, &idx, EVAL_CHUNK)?;
    let mut m = ConfusionMatrix::new(model.classes);
    for (&(_, truth), &p) in pixels.iter().zip(&pred) {
        m.accumulate(truth, p)?;
    }
    Ok(m)
}

/// Trains on the split's training pixels and scores the test pixels.
pub fn run_config(
    scene: &Scene,
    split: &SplitSpec,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    let outcome = train(scene, split, model, cfg)?;
    let normalized = outcome.norm.apply(scene)?;
    let test = split.test_pixels();
    if test.is_empty() {
        return Err(Error::Split("test set is empty".into()));
    }
    let m = evaluate(model, &outcome.params, &normalized, &test)?;
    let report = compute_metrics(&m, &model.id())?;
    Ok(RunOutput {
        model: model.clone(),
        params: outcome.params,
        norm: outcome.norm,
        log: outcome.log,
        report,
    })
}

/// Fisher ranking from the split's training pixels.
pub fn fisher_ranking(scene: &Scene, split: &SplitSpec) -> Result<BandRanking> {
    let train: Vec<usize> = split.train_pixels().into_iter().map(|(p, _)| p).collect();
    rank_bands_fisher(&scene.hsi, &scene.labels, &train)
}

/// Runs all ten grid columns on one shared split. The first failing column
/// aborts the grid.
pub fn run_grid(
    scene: &Scene,
    split: &SplitSpec,
    ranking: &BandRanking,
    patch: usize,
    opts: &ModelOptions,
    cfg: &TrainConfig,
) -> Result<Vec<RunOutput>> {
    grid_configs()
        .iter()
        .map(|id| {
            let model = opts.model_config(id, scene, Some(ranking), patch)?;
            run_config(scene, split, &model, cfg)
                .map_err(|e| Error::Training(format!("grid column {id} failed: {e}")))
        })
        .collect()
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Table layout: one row per class recall, then OA, AA, Kappa; one column
/// per configuration.
pub fn grid_csv(reports: &[MetricsReport], classes: usize) -> String {
    let mut s = String::from("metric");
    for r in reports {
        let _ = write!(s, ",{}", r.config);
    }
    s.push('\n');
    for c in 0..classes {
        let _ = write!(s, "class_{}", c + 1);
        for r in reports {
            let _ = write!(s, ",{}", fmt_metric(r.per_class.get(c).copied().flatten()));
        }
        s.push('\n');
    }
    for (name, get) in [
        (
            "OA",
            (|r: &MetricsReport| r.oa) as fn(&MetricsReport) -> f64,
        ),
        ("AA", |r| r.aa),
        ("Kappa", |r| r.kappa),
    ] {
        s.push_str(name);
        for r in reports {
            let _ = write!(s, ",{}", fmt_metric(Some(get(r))));
        }
        s.push('\n');
    }
    s
}

/// Parses and validates a list of patch sizes: odd, strictly ascending,
/// each within the scene.
pub fn parse_sizes(list: &str, height: usize, width: usize) -> Result<Vec<usize>> {
    let sizes = list
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{t}` is not a patch size")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_sizes(&sizes, height, width)?;
    Ok(sizes)
}

pub fn validate_sizes(sizes: &[usize], height: usize, width: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("no patch sizes given".into()));
    }
    for w in sizes.windows(2) {
        if w[1] == w[0] {
            return Err(Error::Config(format!("patch size {} listed twice", w[0])));
        }
        if w[1] < w[0] {
            return Err(Error::Config("patch sizes must be ascending".into()));
        }
    }
    for &p in sizes {
        if p % 2 == 0 {
            return Err(Error::Config(format!("patch size {p} is not odd")));
        }
        if p > height.min(width) {
            return Err(Error::Config(format!(
                "patch size {p} exceeds scene extent {height}x{width}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub patch: usize,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

pub fn run_sweep(
    scene: &Scene,
    split: &SplitSpec,
    id: &ConfigId,
    ranking: Option<&BandRanking>,
    sizes: &[usize],
    opts: &ModelOptions,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    validate_sizes(sizes, scene.height(), scene.width())?;
    sizes
        .iter()
        .map(|&p| {
            let model = opts.model_config(id, scene, ranking, p)?;
            let out = run_config(scene, split, &model, cfg)?;
            Ok(SweepRow {
                patch: p,
                oa: out.report.oa,
                aa: out.report.aa,
                kappa: out.report.kappa,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("patch,oa,aa,kappa\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.patch, r.oa, r.aa, r.kappa);
    }
    s
}
