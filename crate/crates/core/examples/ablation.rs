//! Fusion paths on/off crossed with mixed training on/off, on the bundled
//! synthetic databases.
//!
//! ```text
//! cargo run --release --example ablation -- 1 2 3
//! ```
//!
//! Each argument is a seed; the table goes to stdout as CSV.

use std::time::Instant;

use stairiqa::data::synth::synthetic_dataset;
use stairiqa::data::SyntheticSpec;
use stairiqa::experiment::{ablation_grid, run_ablation, ExperimentSetup};

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap_or_else(|_| panic!("seed `{a}` is not an unsigned integer")))
        .collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    let setup = ExperimentSetup::desk();
    let spec = SyntheticSpec::default();
    let data: Vec<_> = spec
        .databases
        .iter()
        .map(|d| synthetic_dataset(d, spec.seed, &setup.preprocess).expect("bundled spec renders"))
        .collect();
    let start = Instant::now();
    let table = run_ablation(&setup, &data, &ablation_grid(&setup.backbone), &seeds).expect("ablation runs");
    print!("{}", table.to_csv());
    eprintln!("{:.1}s", start.elapsed().as_secs_f64());
}
