//! Train a small two-layer transformer on binary order-2 Markov data and
//! watch the gap to the Bayes-optimal loss shrink.
//!
//! `cargo run --release --example train_markov -- 2000`
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use kgram::train::{train, TrainConfig};

fn main() -> kgram::Result<()> {
    let mut cfg = TrainConfig::default_k2();
    cfg.iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    cfg.eval_every = (cfg.iterations / 10).max(1);
    cfg.eval_seqs = 100;
    let (_, log) = train(&cfg, 0)?;
    log.write_csv(&mut std::io::stdout().lock())?;
    Ok(())
}
