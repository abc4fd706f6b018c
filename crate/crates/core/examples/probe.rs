//! Cross-influence of the rank-limited pipeline versus the plain backbone.
//!
//! `cargo run --release --example probe -- [SEED ...]`; reads `$CRAFTLORA_CONFIG` if set.

use std::time::Instant;

use craftlora::config::RunConfig;
use craftlora::pipeline::disentanglement_probe;

fn main() -> Result<(), craftlora::Error> {
    env_logger::init();
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    let base = RunConfig::resolve(None)?;
    for seed in seeds {
        let start = Instant::now();
        let cfg = RunConfig { seed, ..base.clone() };
        let p = disentanglement_probe(&cfg, 3, 4)?;
        println!(
            "seed {seed}: S_x rank-limited {:.4}, plain {:.4}, reduction {:.1}%  trunk {:.4} -> {:.4}  ({:.1}s)",
            p.s_x_rank_limited,
            p.s_x_plain,
            100.0 * p.relative_reduction(),
            p.trunk_initial_loss,
            p.trunk_final_loss,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
