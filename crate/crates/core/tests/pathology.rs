//! The default generator must trap plain MIL on object parts, otherwise the
//! comparison against the continuation objective says nothing.

use cmil::experiment::{mil_part_dominance, Benchmark};
use cmil::train::median;
use cmil::TrainConfig;

const PROBE_EPOCH: usize = 5;
const MIN_PART_DOMINANCE: f64 = 0.6;

#[test]
fn mil_selects_parts_on_default_benchmark() {
    let bench = Benchmark::default();
    let rates: Vec<f64> = (0..10u64)
        .map(|seed| {
            let synth = bench.synth.split(seed, bench.train_bags);
            let cfg = TrainConfig { seed, ..bench.train.clone() };
            mil_part_dominance(&synth, &cfg, PROBE_EPOCH).unwrap()
        })
        .collect();
    let m = median(&rates);
    assert!(m >= MIN_PART_DOMINANCE, "median part dominance {m:.3}, per seed {rates:?}");
}
