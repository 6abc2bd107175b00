//! Mean and spread of attention maps for the first-order construction. The
//! first layer attends to the previous token on every sequence, so its
//! spread is zero.
use kgram::analysis::{assumption1_score, attention_stats};
use kgram::constructions::{build, recommended_kappa, Construction};

fn main() -> kgram::Result<()> {
    let (spec, w) = build(Construction::T1, 3, 1, recommended_kappa(1, 32, 1e-3)?, 32)?;
    let stats = attention_stats(&spec, &w, 3, 1, 64, 32, 0)?;
    for l in 0..spec.layers() {
        println!("layer {l}: max std {:.3e}", assumption1_score(&stats, l)?);
    }
    stats.write_slice_csv(10, &mut std::io::stdout().lock())
}
