//! Sample a small binary order-1 dataset and print it.
use kgram::markov::{generate_dataset, write_dataset};

fn main() -> kgram::Result<()> {
    let (seqs, checksum) = generate_dataset(2, 1, 32, 5, 7)?;
    let mut out = std::io::stdout().lock();
    write_dataset(&mut out, 2, 1, 32, 7, &seqs)?;
    eprintln!("kernel checksum {checksum:016x}");
    Ok(())
}
