//! Trains DB1Li (p = 7, 20 pixels per class) on the default synthetic scene
//! and reports test metrics. The learning rate can be overridden:
//!
//! ```text
//! cargo run --release --example convergence -- 1e-4
//! ```

use std::time::Instant;

use bandfuse::band_order::ConfigId;
use bandfuse::data::make_split;
use bandfuse::experiment::{run_config, ModelOptions};
use bandfuse::synth::{generate, SynthConfig};
use bandfuse::trainer::TrainConfig;

fn main() -> bandfuse::Result<()> {
    let lr = match std::env::args().nth(1) {
        Some(s) => s
            .parse()
            .map_err(|_| bandfuse::Error::Config(format!("`{s}` is not a learning rate")))?,
        None => TrainConfig::default().lr,
    };
    let start = Instant::now();
    let scene = generate(&SynthConfig::default())?;
    let split = make_split(&scene.labels, 20, 42)?;
    let id: ConfigId = "db1li".parse()?;
    let model = ModelOptions::default().model_config(&id, &scene, None, 7)?;
    let cfg = TrainConfig {
        seed: 42,
        lr,
        ..TrainConfig::default()
    };
    let out = run_config(&scene, &split, &model, &cfg)?;
    for e in out.log.iter().step_by(10) {
        println!(
            "epoch {:>3}  loss {:.4}  train OA {:.3}",
            e.epoch, e.mean_loss, e.train_oa
        );
    }
    println!(
        "lr {lr:e}: OA {:.4} AA {:.4} Kappa {:.4} in {:.1?}",
        out.report.oa,
        out.report.aa,
        out.report.kappa,
        start.elapsed()
    );
    Ok(())
}
