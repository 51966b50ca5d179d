//! End-to-end acceptance checks. Runs without the libtest harness so each
//! check prints exactly one PASS/FAIL line; the process exits non-zero when
//! any check fails.
//!
//! Set `BANDFUSE_HOUSTON` to a converted Houston 2013 scene directory to run
//! the real-data grid check; it is skipped otherwise.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use bandfuse::band_order::{
    build_order, grid_configs, rank_bands_fisher, BandRanking, ConfigId, OrderId,
};
use bandfuse::data::{make_split, quantize, read_scene, write_scene, HsiCube, LabelMap, Patch};
use bandfuse::experiment::{run_config, ModelOptions, RunOutput};
use bandfuse::hslinet::{
    forward, init_params, loss_and_grads, ModelConfig, ModelParams, SampleBatch,
};
use bandfuse::metrics::{compute_metrics, render_map, ConfusionMatrix};
use bandfuse::rng::{self, Rng as Xoshiro};
use bandfuse::synth::{generate, SynthConfig};
use bandfuse::tensor::{check_gradients, Tape, Tensor};
use bandfuse::trainer::{
    load_checkpoint, log_csv, predict_pixels, save_checkpoint, Checkpoint, TrainConfig,
};

// Pinned tolerances and thresholds.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const METRIC_TOL: f64 = 1e-12;
const REVERSAL_PAIRS: usize = 1000;
const REVERSAL_TOL: f64 = 1e-12;
const MATERIALITY_INITS: usize = 100;
const MATERIALITY_REQUIRED: usize = 95;
const MATERIALITY_ATTEMPTS: usize = 100;
const MATERIALITY_DELTA: f64 = 1e-6;
const NEUTRALITY_TOL: f64 = 1e-9;
const MIN_OA: f64 = 0.95;
const MIN_AA: f64 = 0.93;
const MIN_KAPPA: f64 = 0.93;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(180);
const FISHER_EXPECTED: f64 = 16.0;
const DB_PAIRS: usize = 1000;

type Check = Result<String, String>;

fn micro(streams: &[(OrderId, bool)], kernel: usize) -> ModelConfig {
    let ranking = BandRanking::from_scores(vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2]).unwrap();
    let orders = streams
        .iter()
        .map(|&(id, li)| build_order(id, 6, Some(&ranking)).unwrap().with_lidar(li))
        .collect();
    ModelConfig {
        filters: 4,
        kernel,
        hidden: 8,
        ..ModelConfig::new(6, orders, 3, 3)
    }
}

fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut Xoshiro) -> SampleBatch {
    let patches: Vec<Patch> = (0..n)
        .map(|i| Patch {
            size: cfg.patch,
            bands: cfg.bands,
            hsi: (0..cfg.pixels() * cfg.bands)
                .map(|_| rng.random::<f64>())
                .collect(),
            lidar: (0..cfg.pixels()).map(|_| rng.random::<f64>()).collect(),
            label: (i % cfg.classes) as u16 + 1,
        })
        .collect();
    let refs: Vec<&Patch> = patches.iter().collect();
    SampleBatch::from_patches(&refs, &cfg.orders).unwrap()
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let configs = [
        micro(&[(OrderId::Db1, true), (OrderId::Db2, true)], 3),
        micro(&[(OrderId::Db3, false), (OrderId::Db4, false)], 3),
        micro(&[(OrderId::Db3, true)], 3),
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let params = init_params(cfg, 11 + i as u64).map_err(|e| e.to_string())?;
        let batch = random_batch(cfg, 2, &mut rng::stream(1, 1, i as u64));
        let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let f = |p: &[Tensor]| {
            let mp = ModelParams::from_tensors(cfg, p.to_vec())?;
            let ev = loss_and_grads(cfg, &mp, &batch)?;
            Ok((ev.loss, ev.grads.tensors().into_iter().cloned().collect()))
        };
        let check = check_gradients(f, &flat, GRAD_STEP).map_err(|e| e.to_string())?;
        worst = worst.max(check.max_rel_error);
    }
    let elapsed = start.elapsed();
    let msg = format!(
        "max rel error {worst:.2e} (tol {GRAD_REL_TOL:e}), {elapsed:.2?} (budget {GRAD_BUDGET:?})"
    );
    if worst <= GRAD_REL_TOL && elapsed < GRAD_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Reference metrics straight from a list of (truth, prediction) pairs.
fn brute_force(pairs: &[(usize, usize)], k: usize) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let oa = correct / n;
    let mut recalls = Vec::new();
    let mut pe = 0.0;
    for c in 0..k {
        let truth = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
        let pred = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
        let hit = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
        if truth > 0.0 {
            recalls.push(hit / truth);
        }
        pe += truth * pred / (n * n);
    }
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (oa, aa, (oa - pe) / (1.0 - pe))
}

fn metric_oracle() -> Check {
    let three = [vec![50, 3, 2], vec![5, 40, 5], vec![1, 4, 30]];
    let mut pairs = Vec::new();
    for (t, row) in three.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    // shuffle so the oracle does not depend on enumeration order
    pairs.shuffle(&mut rng::stream(2, 2, 0));
    let mut from_list = ConfusionMatrix::new(3);
    for &(t, p) in &pairs {
        from_list
            .accumulate(t as u16 + 1, p as u16 + 1)
            .map_err(|e| e.to_string())?;
    }
    let cases = [
        (
            ConfusionMatrix::from_rows(&[vec![7, 0, 0], vec![0, 5, 0], vec![0, 0, 9]]).unwrap(),
            (1.0, 1.0, 1.0),
        ),
        (
            ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap(),
            (0.7, 0.7, 0.4),
        ),
        (from_list, brute_force(&pairs, 3)),
    ];
    let mut worst = 0.0f64;
    for (m, (oa, aa, kappa)) in &cases {
        let r = compute_metrics(m, "oracle").map_err(|e| e.to_string())?;
        worst = worst
            .max((r.oa - oa).abs())
            .max((r.aa - aa).abs())
            .max((r.kappa - kappa).abs());
    }
    let msg = format!("3 matrices, max deviation {worst:.1e} (tol {METRIC_TOL:e})");
    if worst <= METRIC_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn conv(x: &[f64], k: &[f64], b: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
    let kv = tape.leaf(Tensor::new(vec![1, 1, k.len()], k.to_vec()).unwrap());
    let bv = tape.leaf(Tensor::new(vec![1], vec![b]).unwrap());
    let y = tape.conv1d_same(xv, kv, bv).unwrap();
    tape.value(y).data().to_vec()
}

fn reversal_equivariance() -> Check {
    let mut rng = rng::stream(3, 3, 0);
    let mut worst = 0.0f64;
    for _ in 0..REVERSAL_PAIRS {
        let len = rng.random_range(1..=64);
        let k = 2 * rng.random_range(0..=5) + 1;
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
        let lhs = conv(&rev(&x), &rev(&w), b);
        let rhs = rev(&conv(&x, &w, b));
        for (a, c) in lhs.iter().zip(&rhs) {
            worst = worst.max((a - c).abs());
        }
    }
    let msg = format!("{REVERSAL_PAIRS} pairs, max deviation {worst:.1e} (tol {REVERSAL_TOL:e})");
    if worst <= REVERSAL_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn permute_sequences(t: &Tensor, perm: &[usize]) -> Tensor {
    let l = perm.len();
    let data = t
        .data()
        .chunks_exact(l)
        .flat_map(|row| perm.iter().map(|&b| row[b]).collect::<Vec<_>>())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn order_materiality() -> Check {
    let cfg = micro(&[(OrderId::Db1, false)], 3);
    let l = cfg.bands;
    let mut material = 0;
    for seed in 0..MATERIALITY_INITS as u64 {
        let params = init_params(&cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = rng::stream(seed, 4, 0);
        let batch = random_batch(&cfg, 1, &mut rng);
        let base = forward(&cfg, &params, &batch).map_err(|e| e.to_string())?;
        for _ in 0..MATERIALITY_ATTEMPTS {
            let mut perm: Vec<usize> = (0..l).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                perm.shuffle(&mut rng);
            }
            let mut pb = batch.clone();
            pb.streams[0] = permute_sequences(&batch.streams[0], &perm);
            if linf(
                &base,
                &forward(&cfg, &params, &pb).map_err(|e| e.to_string())?,
            ) > MATERIALITY_DELTA
            {
                material += 1;
                break;
            }
        }
    }

    let cfg1 = micro(&[(OrderId::Db1, false)], 1);
    let d = cfg1.hidden;
    let mut drift = 0.0f64;
    for seed in 0..MATERIALITY_INITS as u64 {
        let params = init_params(&cfg1, seed).map_err(|e| e.to_string())?;
        let mut rng = rng::stream(seed, 5, 0);
        let batch = random_batch(&cfg1, 2, &mut rng);
        let base = forward(&cfg1, &params, &batch).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng);
        let mut pb = batch.clone();
        pb.streams[0] = permute_sequences(&batch.streams[0], &perm);
        let mut pp = params.clone();
        let src = params.streams[0].proj_w.data();
        let dst = pp.streams[0].proj_w.data_mut();
        for ch in 0..cfg1.filters {
            for (t, &b) in perm.iter().enumerate() {
                let (to, from) = ((ch * l + t) * d, (ch * l + b) * d);
                dst[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
        drift = drift.max(linf(
            &base,
            &forward(&cfg1, &pp, &pb).map_err(|e| e.to_string())?,
        ));
    }
    let msg = format!(
        "{material}/{MATERIALITY_INITS} inits order-sensitive (need {MATERIALITY_REQUIRED}, delta {MATERIALITY_DELTA:e}); \
         k=1 drift {drift:.1e} (tol {NEUTRALITY_TOL:e})"
    );
    if material >= MATERIALITY_REQUIRED && drift <= NEUTRALITY_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Convergence {
    scene: bandfuse::data::Scene,
    run: RunOutput,
    elapsed: Duration,
}

fn convergence_run() -> Result<Convergence, String> {
    let start = Instant::now();
    let scene = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let split = make_split(&scene.labels, 20, 42).map_err(|e| e.to_string())?;
    let id: ConfigId = "db1li"
        .parse()
        .map_err(|e: bandfuse::Error| e.to_string())?;
    let model = ModelOptions::default()
        .model_config(&id, &scene, None, 7)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let run = run_config(&scene, &split, &model, &cfg).map_err(|e| e.to_string())?;
    Ok(Convergence {
        scene,
        run,
        elapsed: start.elapsed(),
    })
}

fn synthetic_convergence(c: &Convergence) -> Check {
    let r = &c.run.report;
    let msg = format!(
        "OA {:.4} (>= {MIN_OA}), AA {:.4} (>= {MIN_AA}), Kappa {:.4} (>= {MIN_KAPPA}), {:.1?} (budget {CONVERGENCE_BUDGET:?}); \
         final epoch loss {:.4}",
        r.oa,
        r.aa,
        r.kappa,
        c.elapsed,
        c.run.log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN)
    );
    if r.oa >= MIN_OA && r.aa >= MIN_AA && r.kappa >= MIN_KAPPA && c.elapsed <= CONVERGENCE_BUDGET {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn grid_protocol(dir: &Path) -> Check {
    let data = dir.join("synthetic");
    write_scene(
        &generate(&SynthConfig::default()).map_err(|e| e.to_string())?,
        &data,
    )
    .map_err(|e| e.to_string())?;
    let csv = dir.join("grid.csv");
    bandfuse::cli::run([
        "bandfuse",
        "grid",
        "--data",
        data.to_str().unwrap(),
        "--patch",
        "9",
        "--train-per-class",
        "10",
        "--seed",
        "42",
        "--epochs",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ])
    .map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[0].split(',').skip(1).collect();
    let expected: Vec<String> = grid_configs().iter().map(ToString::to_string).collect();
    let k = SynthConfig::default().classes;

    let scene = read_scene(&data).map_err(|e| e.to_string())?;
    let ranking = BandRanking::from_scores(vec![0.0; scene.bands()]).map_err(|e| e.to_string())?;
    let mut streams = Vec::new();
    for id in grid_configs() {
        let m = ModelOptions::default()
            .model_config(&id, &scene, Some(&ranking), 9)
            .map_err(|e| e.to_string())?;
        streams.push((id.to_string(), m.num_streams()));
    }
    let dual_ok = streams
        .iter()
        .all(|(name, n)| *n == if name.contains('+') { 2 } else { 1 });
    let manifest = bandfuse::manifest::RunManifest::load(&dir.join("grid.manifest.json"))
        .map_err(|e| e.to_string())?;
    let shared = manifest.split.map(|s| (s.seed, s.train_per_class)) == Some((42, 10));

    let msg = format!(
        "{} config columns, {} metric rows (K+3 = {}), dual-pair columns two-stream: {dual_ok}, shared split recorded: {shared}",
        header.len(),
        lines.len() - 1,
        k + 3
    );
    if header == expected && lines.len() - 1 == k + 3 && dual_ok && shared {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism(first: &Convergence, dir: &Path) -> Check {
    let second = convergence_run()?;
    let a = dir.join("report_a.json");
    let b = dir.join("report_b.json");
    first.run.report.save(&a).map_err(|e| e.to_string())?;
    second.run.report.save(&b).map_err(|e| e.to_string())?;
    let same_report = std::fs::read(&a).map_err(|e| e.to_string())?
        == std::fs::read(&b).map_err(|e| e.to_string())?;
    let same_log = log_csv(&first.run.log) == log_csv(&second.run.log);
    let msg = format!("identical epoch log: {same_log}, identical report.json: {same_report}");
    if same_log && same_report {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn round_trips(c: &Convergence, dir: &Path) -> Check {
    let scene_dir = dir.join("roundtrip");
    write_scene(&c.scene, &scene_dir).map_err(|e| e.to_string())?;
    let scene_ok = read_scene(&scene_dir).map_err(|e| e.to_string())? == c.scene;

    let path = dir.join("model.bin");
    let ckpt = Checkpoint {
        config: c.run.model.clone(),
        params: c.run.params.clone(),
        norm: Some(c.run.norm.clone()),
        split: None,
    };
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let params_ok = back.config == ckpt.config
        && back
            .params
            .tensors()
            .iter()
            .zip(ckpt.params.tensors())
            .all(|(l, o)| {
                l.data()
                    .iter()
                    .zip(o.data())
                    .all(|(&x, &y)| x == quantize(y))
            });

    let normalized = c.run.norm.apply(&c.scene).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..c.scene.height() * c.scene.width()).collect();
    let render = || -> Result<Vec<u8>, String> {
        let pred = predict_pixels(&back.config, &back.params, &normalized, &all, 256)
            .map_err(|e| e.to_string())?;
        render_map(&pred, c.scene.height(), c.scene.width(), c.scene.classes())
            .map_err(|e| e.to_string())
    };
    let map_ok = render()? == render()?;

    let msg = format!("scene lossless: {scene_ok}, model lossless at f32: {params_ok}, PPM byte-identical: {map_ok}");
    if scene_ok && params_ok && map_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ranking_surrogate() -> Check {
    let cube = HsiCube::new(1, 4, 1, vec![0.0, 0.2, 0.8, 1.0]).map_err(|e| e.to_string())?;
    let labels = LabelMap::new(1, 4, 2, vec![1, 1, 2, 2]).map_err(|e| e.to_string())?;
    let score = rank_bands_fisher(&cube, &labels, &[0, 1, 2, 3])
        .map_err(|e| e.to_string())?
        .scores()[0];
    let exact = score == FISHER_EXPECTED;

    let mut rng = rng::stream(9, 9, 0);
    let mut reversed = 0;
    for i in 0..DB_PAIRS {
        let c = rng.random_range(1..=48);
        let ranking = if i % 2 == 0 {
            // coarse scores to exercise ties
            BandRanking::from_scores(
                (0..c)
                    .map(|_| f64::from(rng.random_range(0..4u8)))
                    .collect(),
            )
        } else {
            let mut p: Vec<usize> = (0..c).collect();
            p.shuffle(&mut rng);
            BandRanking::from_permutation(p)
        }
        .map_err(|e| e.to_string())?;
        let db3 = build_order(OrderId::Db3, c, Some(&ranking)).map_err(|e| e.to_string())?;
        let db4 = build_order(OrderId::Db4, c, Some(&ranking)).map_err(|e| e.to_string())?;
        let rev: Vec<usize> = db3.permutation.iter().rev().copied().collect();
        reversed += usize::from(db4.permutation == rev);
    }
    let msg = format!(
        "Fisher hand example {score:?} (required exactly {FISHER_EXPECTED:?}); DB4 == reverse(DB3) for {reversed}/{DB_PAIRS} rankings"
    );
    if exact && reversed == DB_PAIRS {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn real_data(dir: &Path) -> Option<Check> {
    let scene = std::env::var_os("BANDFUSE_HOUSTON")?;
    let run = || -> Check {
        let data = Path::new(&scene);
        let meta = bandfuse::data::read_meta(data).map_err(|e| e.to_string())?;
        let csv = dir.join("houston_grid.csv");
        bandfuse::cli::run([
            "bandfuse",
            "grid",
            "--data",
            data.to_str().unwrap(),
            "--train-per-class",
            "10",
            "--patch",
            "9",
            "--out",
            csv.to_str().unwrap(),
        ])
        .map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
        let lines: Vec<&str> = text.lines().collect();
        let cols = lines[0].split(',').count() - 1;
        let msg = format!(
            "{cols} config columns, {} metric rows for K = {}",
            lines.len() - 1,
            meta.classes
        );
        if cols == 10 && lines.len() - 1 == meta.classes + 3 {
            Ok(msg)
        } else {
            Err(msg)
        }
    };
    Some(run())
}

fn report(n: usize, name: &str, outcome: Check, failures: &mut usize) {
    match outcome {
        Ok(msg) => println!("PASS [{n:>2}] {name}: {msg}"),
        Err(msg) => {
            *failures += 1;
            println!("FAIL [{n:>2}] {name}: {msg}");
        }
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut failures = 0;

    report(1, "gradient fidelity", gradient_fidelity(), &mut failures);
    report(2, "metric oracle", metric_oracle(), &mut failures);
    report(
        3,
        "reversal equivariance",
        reversal_equivariance(),
        &mut failures,
    );
    report(
        4,
        "band-order materiality",
        order_materiality(),
        &mut failures,
    );

    let convergence = convergence_run();
    match &convergence {
        Ok(c) => report(
            5,
            "synthetic convergence",
            synthetic_convergence(c),
            &mut failures,
        ),
        Err(e) => report(5, "synthetic convergence", Err(e.clone()), &mut failures),
    }
    report(6, "grid protocol", grid_protocol(dir), &mut failures);
    match &convergence {
        Ok(c) => {
            report(7, "determinism", determinism(c, dir), &mut failures);
            report(8, "round trips", round_trips(c, dir), &mut failures);
        }
        Err(e) => {
            report(
                7,
                "determinism",
                Err(format!("no baseline run: {e}")),
                &mut failures,
            );
            report(
                8,
                "round trips",
                Err(format!("no baseline run: {e}")),
                &mut failures,
            );
        }
    }
    report(9, "ranking surrogate", ranking_surrogate(), &mut failures);
    match real_data(dir) {
        Some(outcome) => report(10, "real-data path", outcome, &mut failures),
        None => println!("SKIP [10] real-data path: BANDFUSE_HOUSTON not set"),
    }

    println!("acceptance: {} of 10 checks failed", failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
