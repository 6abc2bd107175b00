//! Check every weight construction against the brute-force k-gram oracle.
use kgram::constructions::{recommended_kappa, verify_construction, Construction, ConstructionReport};

fn main() -> kgram::Result<()> {
    println!("{}", ConstructionReport::CSV_HEADER);
    for c in Construction::ALL {
        for k in 1..=3 {
            if !c.supports(k) {
                continue;
            }
            let kappa = recommended_kappa(k, 64, 1e-3)?;
            let r = verify_construction(c, 2, k, 64, 50, kappa, 1e-3)?;
            println!("{}", r.csv_row());
        }
    }
    Ok(())
}
