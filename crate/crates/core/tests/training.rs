#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use kgram::train::{train, TrainConfig};

fn first_order(iterations: usize) -> TrainConfig {
    TrainConfig {
        s: 2,
        k: 1,
        t: 128,
        layers: 2,
        heads: 1,
        d: 16,
        iterations,
        eval_every: iterations / 5,
        eval_seqs: 200,
        ..TrainConfig::default_k2()
    }
}

#[test]
fn first_order_gap_falls_below_a_tenth_of_a_nat() {
    let (_, log) = train(&first_order(5000), 0).unwrap();
    let first = log.rows.first().unwrap().gap;
    let last = log.last().unwrap().gap;
    assert!(first > 0.1, "initial gap {first}");
    assert!(last < 0.1, "final gap {last}");
    for r in &log.rows {
        assert!(r.gap.is_finite() && r.test_loss >= 0.0);
    }
}

#[test]
fn longer_budget_does_not_hurt() {
    let (_, short) = train(&first_order(500), 1).unwrap();
    let (_, long) = train(&first_order(2500), 1).unwrap();
    let (a, b) = (short.last().unwrap().gap, long.last().unwrap().gap);
    assert!(b <= a, "gap after 2500 iterations {b} exceeds gap after 500 {a}");
}
