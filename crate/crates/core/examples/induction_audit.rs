//! Does the final attention layer put its mass uniformly on the positions
//! that follow earlier copies of the current context? The constructed
//! network does; a random one does not.
use kgram::analysis::induction_head_audit;
use kgram::constructions::{build, recommended_kappa, Construction};
use kgram::model::{init_weights, TransformerSpec};

fn main() -> kgram::Result<()> {
    let (spec, w) = build(Construction::T4, 2, 2, recommended_kappa(2, 64, 1e-3)?, 64)?;
    let r = induction_head_audit(&spec, &w, 2, 2, 100, 64, 0, 2)?;
    println!("constructed: {r:?}");

    let spec = TransformerSpec::standard(3, 1, 32, 2, 64);
    let w = init_weights(&spec, 0)?;
    let r = induction_head_audit(&spec, &w, 2, 2, 100, 64, 0, 2)?;
    println!("random:      {r:?}");
    Ok(())
}
