//! Smallest distance between normalized context embeddings, found by
//! exhaustive search, against the `3^-k` lower bound.
use kgram::analysis::normerror_bruteforce;

fn main() -> kgram::Result<()> {
    for s in 2..=3 {
        for k in 1..=4 {
            let r = normerror_bruteforce(s, k)?;
            println!(
                "S={s} k={k} min={:.6} bound={:.6} holds={} witness={:?}",
                r.min_distance, r.bound, r.holds_exactly, r.witness
            );
        }
    }
    Ok(())
}
