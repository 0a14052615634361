//! Times EDA against transformer attractors on one worker thread.
//!
//! `cargo run --release --example throughput_bench [frames...]`

use eend::commands::cmd_bench;
use eend::config::RunConfig;

fn main() -> eend::Result<()> {
    let mut cfg = RunConfig::default();
    let frames: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    cfg.bench.t_values = if frames.is_empty() { vec![250, 500, 1000] } else { frames };
    print!("{}", cmd_bench(&cfg)?.format());
    Ok(())
}
