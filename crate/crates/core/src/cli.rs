//! `bandfuse` subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::band_order::{load_ranking, BandRanking, ConfigId};
use crate::data::{make_split, read_scene, write_file, write_scene, Scene, SplitSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    evaluate, fisher_ranking, grid_csv, parse_sizes, run_config, run_grid, run_sweep, sweep_csv,
    ModelOptions,
};
use crate::hslinet::{DEFAULT_FILTERS, DEFAULT_HIDDEN, DEFAULT_KERNEL};
use crate::manifest::{dataset_ref, manifest_path, RunManifest};
use crate::metrics::{compute_metrics, write_map};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{
    load_checkpoint, predict_pixels, save_checkpoint, write_log, Checkpoint, SplitRecord,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "bandfuse",
    version,
    about = "Band-order-aware HSI + LiDAR fusion classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Rank bands by importance, or import an external ranking.
    Rank(RankArgs),
    /// Train one configuration and save the model.
    Train(TrainArgs),
    /// Score a saved model on a scene.
    Eval(EvalArgs),
    /// Train and score all ten band-order configurations on one split.
    Grid(GridArgs),
    /// Train and score one configuration across patch sizes.
    SweepPatch(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub bands: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub spec_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lidar_noise: f64,
    #[arg(long, default_value_t = 5)]
    pub smoothing: usize,
    #[arg(long, default_value_t = 4)]
    pub granularity: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankMethod {
    Fisher,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = RankMethod::Fisher, conflicts_with = "import")]
    pub method: RankMethod,
    #[arg(long, default_value_t = 0, conflicts_with = "import")]
    pub split_seed: u64,
    #[arg(long, required_unless_present = "import", conflicts_with = "import")]
    pub train_per_class: Option<usize>,
    /// External ranking: JSON, or a list of scores or a band permutation.
    #[arg(long)]
    pub import: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingFlags {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Learning-rate factor applied after each epoch.
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    /// Stop after this many epochs without loss improvement.
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long)]
    pub no_shuffle: bool,
}

impl TrainingFlags {
    fn config(&self, seed: u64, dump: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed,
            shuffle: !self.no_shuffle,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            early_stop_patience: self.early_stop,
            divergence_dump: dump,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long, default_value_t = DEFAULT_FILTERS)]
    pub filters: usize,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    pub kernel: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Keep only the k most important bands in ranked orders.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Experimental: project to the hidden width before the convolutions.
    #[arg(long)]
    pub project_first: bool,
}

impl ModelFlags {
    fn options(&self) -> ModelOptions {
        ModelOptions {
            filters: self.filters,
            kernel: self.kernel,
            hidden: self.hidden,
            project_first: self.project_first,
            top_k: self.top_k,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub order: String,
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for the train/test split; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Score every labeled pixel instead of the stored test split.
    #[arg(long)]
    pub all_labeled: bool,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub patch: usize,
    #[arg(long)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ranking for DB3/DB4; computed from the training pixels when absent.
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub order: String,
    #[arg(long, default_value = "1,3,5,7,9,11,13,15")]
    pub sizes: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub train_per_class: usize,
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Config(e.to_string()))?;
    let recorded: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    execute(cli.command, recorded)
}

pub fn execute(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, args),
        Command::Rank(a) => rank(a, args),
        Command::Train(a) => train(a, args),
        Command::Eval(a) => eval(a, args),
        Command::Grid(a) => grid(a, args),
        Command::SweepPatch(a) => sweep(a, args),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ranking_for(id: &ConfigId, path: Option<&Path>, bands: usize) -> Result<Option<BandRanking>> {
    match path {
        Some(p) => load_ranking(p, bands).map(Some),
        None if id.needs_ranking() => Err(Error::Config(format!(
            "order {id} needs a band ranking (--ranking FILE)"
        ))),
        None => Ok(None),
    }
}

fn synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("synth", args);
    let cfg = SynthConfig {
        classes: a.classes,
        bands: a.bands,
        height: a.height,
        width: a.width,
        seed: a.seed,
        spectral_noise: a.spec_noise,
        lidar_noise: a.lidar_noise,
        smoothing: a.smoothing,
        granularity: a.granularity,
    };
    let scene = generate(&cfg)?;
    write_scene(&scene, &a.out)?;
    let dataset = dataset_ref(&a.out)?;
    println!("wrote {} ({})", a.out.display(), dataset.sha256);
    manifest.dataset = Some(dataset);
    manifest.synth = Some(cfg);
    manifest.outputs.push(a.out.clone());
    manifest.finish(&a.out.join("manifest.json"))
}

fn rank(a: RankArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("rank", args);
    let scene = read_scene(&a.data)?;
    let ranking = match (&a.import, a.train_per_class) {
        (Some(file), _) => load_ranking(file, scene.bands())?,
        (None, Some(n)) => {
            let split = make_split(&scene.labels, n, a.split_seed)?;
            manifest.split = Some(SplitRecord {
                seed: a.split_seed,
                train_per_class: n,
            });
            match a.method {
                RankMethod::Fisher => fisher_ranking(&scene, &split)?,
            }
        }
        (None, None) => {
            return Err(Error::Config(
                "--train-per-class is required without --import".into(),
            ))
        }
    };
    ensure_parent(&a.out)?;
    ranking.to_file().save(&a.out)?;
    println!("wrote {}", a.out.display());
    manifest.dataset = Some(dataset_ref(&a.data)?);
    manifest.outputs.push(a.out.clone());
    manifest.finish(&manifest_path(&a.out))
}

fn train(a: TrainArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("train", args);
    let scene = read_scene(&a.data)?;
    let id: ConfigId = a.order.parse()?;
    let ranking = ranking_for(&id, a.ranking.as_deref(), scene.bands())?;
    let model = a
        .model
        .options()
        .model_config(&id, &scene, ranking.as_ref(), a.patch)?;
    let split_seed = a.split_seed.unwrap_or(a.seed);
    let split = make_split(&scene.labels, a.train_per_class, split_seed)?;
    ensure_parent(&a.out)?;
    let cfg = a
        .training
        .config(a.seed, Some(with_suffix(&a.out, ".diverged.bin")));

    let out = run_config(&scene, &split, &model, &cfg)?;
    let record = SplitRecord {
        seed: split_seed,
        train_per_class: a.train_per_class,
    };
    save_checkpoint(
        &Checkpoint {
            config: model.clone(),
            params: out.params,
            norm: Some(out.norm),
            split: Some(record),
        },
        &a.out,
    )?;
    let log_path = with_suffix(&a.out, ".log.csv");
    write_log(&log_path, &out.log)?;
    println!(
        "{}: OA {:.4} AA {:.4} Kappa {:.4} on {} test pixels",
        model.id(),
        out.report.oa,
        out.report.aa,
        out.report.kappa,
        split.test_len()
    );

    manifest.dataset = Some(dataset_ref(&a.data)?);
    manifest.configs = vec![model.id()];
    manifest.model = Some(model);
    manifest.train = Some(cfg);
    manifest.split = Some(record);
    manifest.outputs = vec![a.out.clone(), log_path];
    manifest.finish(&manifest_path(&a.out))
}

fn eval(a: EvalArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("eval", args);
    let ckpt = load_checkpoint(&a.model)?;
    let scene = read_scene(&a.data)?;
    ckpt.check_scene(scene.bands(), scene.classes())?;
    let norm = ckpt.norm.as_ref().ok_or_else(|| {
        Error::Format(format!(
            "{} carries no normalization statistics",
            a.model.display()
        ))
    })?;
    let normalized = norm.apply(&scene)?;

    let pixels: Vec<(usize, u16)> = match (ckpt.split, a.all_labeled) {
        (Some(rec), false) => {
            make_split(&scene.labels, rec.train_per_class, rec.seed)?.test_pixels()
        }
        _ => scene
            .labels
            .labeled_pixels()
            .map(|p| (p, scene.labels.labels()[p]))
            .collect(),
    };
    if pixels.is_empty() {
        return Err(Error::Split("no pixels to evaluate".into()));
    }
    let m = evaluate(&ckpt.config, &ckpt.params, &normalized, &pixels)?;
    let report = compute_metrics(&m, &ckpt.config.id())?;
    ensure_parent(&a.report)?;
    report.save(&a.report)?;
    manifest.outputs.push(a.report.clone());
    println!(
        "{}: OA {:.4} AA {:.4} Kappa {:.4}",
        report.config, report.oa, report.aa, report.kappa
    );

    if let Some(map) = &a.map {
        let all: Vec<usize> = (0..scene.height() * scene.width()).collect();
        let pred = predict_pixels(&ckpt.config, &ckpt.params, &normalized, &all, 256)?;
        ensure_parent(map)?;
        write_map(map, &pred, scene.height(), scene.width(), scene.classes())?;
        manifest.outputs.push(map.clone());
    }

    manifest.dataset = Some(dataset_ref(&a.data)?);
    manifest.configs = vec![ckpt.config.id()];
    manifest.split = ckpt.split;
    manifest.model = Some(ckpt.config);
    manifest.finish(&manifest_path(&a.report))
}

fn shared_split(scene: &Scene, n: usize, seed: u64) -> Result<(SplitSpec, SplitRecord)> {
    let split = make_split(&scene.labels, n, seed)?;
    Ok((
        split,
        SplitRecord {
            seed,
            train_per_class: n,
        },
    ))
}

fn grid(a: GridArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("grid", args);
    let scene = read_scene(&a.data)?;
    let (split, record) = shared_split(&scene, a.train_per_class, a.seed)?;
    let ranking = match &a.ranking {
        Some(p) => load_ranking(p, scene.bands())?,
        None => fisher_ranking(&scene, &split)?,
    };
    let opts = a.model.options();
    let cfg = a.training.config(a.seed, None);
    let runs = run_grid(&scene, &split, &ranking, a.patch, &opts, &cfg)?;

    ensure_parent(&a.out)?;
    let report_dir = with_suffix(&a.out, "_reports");
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let ranking_path = report_dir.join("ranking.json");
    ranking.to_file().save(&ranking_path)?;
    manifest.outputs.push(ranking_path);
    for run in &runs {
        let path = report_dir.join(format!("{}.json", run.report.config));
        run.report.save(&path)?;
        manifest.outputs.push(path);
    }
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    write_file(&a.out, grid_csv(&reports, scene.classes()).as_bytes())?;
    manifest.outputs.insert(0, a.out.clone());
    for r in &reports {
        println!(
            "{:<12} OA {:.4} AA {:.4} Kappa {:.4}",
            r.config, r.oa, r.aa, r.kappa
        );
    }

    manifest.dataset = Some(dataset_ref(&a.data)?);
    manifest.configs = reports.iter().map(|r| r.config.clone()).collect();
    manifest.model_options = Some(opts);
    manifest.train = Some(cfg);
    manifest.split = Some(record);
    manifest.finish(&manifest_path(&a.out))
}

fn sweep(a: SweepArgs, args: Vec<String>) -> Result<()> {
    let mut manifest = RunManifest::new("sweep-patch", args);
    let scene = read_scene(&a.data)?;
    let id: ConfigId = a.order.parse()?;
    let sizes = parse_sizes(&a.sizes, scene.height(), scene.width())?;
    let (split, record) = shared_split(&scene, a.train_per_class, a.seed)?;
    let ranking = match &a.ranking {
        Some(p) => Some(load_ranking(p, scene.bands())?),
        None if id.needs_ranking() => Some(fisher_ranking(&scene, &split)?),
        None => None,
    };
    let opts = a.model.options();
    let cfg = a.training.config(a.seed, None);
    let rows = run_sweep(&scene, &split, &id, ranking.as_ref(), &sizes, &opts, &cfg)?;
    ensure_parent(&a.out)?;
    write_file(&a.out, sweep_csv(&rows).as_bytes())?;
    for r in &rows {
        println!(
            "patch {:>2}: OA {:.4} AA {:.4} Kappa {:.4}",
            r.patch, r.oa, r.aa, r.kappa
        );
    }

    manifest.dataset = Some(dataset_ref(&a.data)?);
    manifest.configs = vec![id.to_string()];
    manifest.model_options = Some(opts);
    manifest.train = Some(cfg);
    manifest.split = Some(record);
    manifest.outputs.push(a.out.clone());
    manifest.finish(&manifest_path(&a.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "bandfuse",
            "train",
            "--data",
            "d",
            "--order",
            "db1li+db2li",
            "--patch",
            "7",
            "--epochs",
            "3",
            "--lr",
            "1e-3",
            "--batch",
            "8",
            "--seed",
            "5",
            "--train-per-class",
            "4",
            "--out",
            "m.bin",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!("expected train")
        };
        assert_eq!(t.training.epochs, 3);
        assert_eq!(t.training.lr, 1e-3);
        assert_eq!(t.split_seed, None);
        let cfg = t.training.config(t.seed, None);
        assert_eq!((cfg.batch_size, cfg.seed, cfg.shuffle), (8, 5, true));
    }

    #[test]
    fn rank_import_excludes_fisher_flags() {
        assert!(Cli::try_parse_from([
            "bandfuse", "rank", "--data", "d", "--import", "r.txt", "--out", "o.json"
        ])
        .is_ok());
        assert!(
            Cli::try_parse_from(["bandfuse", "rank", "--data", "d", "--out", "o.json"]).is_err()
        );
        assert!(Cli::try_parse_from([
            "bandfuse",
            "rank",
            "--data",
            "d",
            "--import",
            "r",
            "--train-per-class",
            "3",
            "--out",
            "o"
        ])
        .is_err());
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(run(["bandfuse", "synth", "--out", "x", "--colour", "red"]).is_err());
    }
}
