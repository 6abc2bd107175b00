//! Error of the layer-norm construction as the temperature grows, in f64
//! and f32.
use kgram::analysis::{precision_sweep, write_sweep_csv, Precision, SweepConfig};
use kgram::constructions::{kappa_ladder, Construction};

fn main() -> kgram::Result<()> {
    let cfg = SweepConfig {
        construction: Construction::T4,
        s: 2,
        k: 2,
        t: 64,
        n_seqs: 20,
        seed: 0,
    };
    let kappas = kappa_ladder(cfg.construction, cfg.k, cfg.t, 8);
    let mut points = precision_sweep(&cfg, &kappas, Precision::F64)?;
    points.extend(precision_sweep(&cfg, &kappas, Precision::F32)?);
    write_sweep_csv(&points, &mut std::io::stdout().lock())
}
