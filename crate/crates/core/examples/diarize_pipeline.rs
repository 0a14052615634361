//! File-based pipeline: simulate, train, infer and score, exactly as the
//! `diar` subcommands do, inside a scratch directory.
//!
//! `cargo run --release --example diarize_pipeline [workdir]`

use std::path::PathBuf;

use eend::commands::{cmd_infer, cmd_score, cmd_simulate, cmd_train, AVERAGED_NAME};
use eend::config::RunConfig;

const CONFIG: &str = "\
model.attractor = ta
model.max_speakers = 2
model.dropout = 0
encoder.num_blocks = 1
encoder.model_dim = 32
encoder.heads = 2
encoder.ff_dim = 64
ta.num_layers = 1
ta.heads = 2
ta.ff_dim = 64
epochs = 60
optimizer.mode = adam-noam
optimizer.lr = 0.02
optimizer.warmup = 100
train.average_best = 3
train.rotate_features = true
sim.min_speakers = 1
sim.max_speakers = 2
sim.beta.1 = 2
sim.beta.2 = 2
sim.duration = 15
";

fn main() -> eend::Result<()> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("eend_pipeline"));
    let mut cfg = RunConfig::parse(CONFIG, std::path::Path::new("<builtin>"))?;

    cfg.sim_count = 120;
    cfg.seed = 1;
    let train_manifest = cmd_simulate(&cfg, &work.join("train"))?;
    cfg.sim_count = 20;
    cfg.seed = 2;
    let test_manifest = cmd_simulate(&cfg, &work.join("test"))?;

    cfg.paths.train_manifest = Some(train_manifest);
    cfg.paths.valid_manifest = Some(test_manifest.clone());
    let run = work.join("run");
    let outcome = cmd_train(&cfg, &run)?;
    for m in &outcome.metrics {
        println!("{}", m.to_line());
    }

    cfg.paths.manifest = Some(test_manifest);
    cfg.paths.checkpoint = Some(run.join(AVERAGED_NAME));
    let hyp = work.join("hyp");
    cmd_infer(&cfg, &hyp)?;
    cfg.paths.hyp_dir = Some(hyp);
    let (_, report) = cmd_score(&cfg)?;
    println!("\n{report}");
    println!("outputs under {}", work.display());
    Ok(())
}
