//! Median validation Kendall's tau of tcc_regression over three training
//! seeds, for several synthetic dataset seeds.
//!
//! cargo run --release -p tcc-core --example seed_sweep -- 0 1 2 3

use tcc::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use tcc::eval::{evaluate, EvalConfig};
use tcc::train::{train, LossKind, TrainConfig};

fn main() {
    let data_seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().expect("seed")).collect();
    for data_seed in data_seeds {
        let seqs = generate_synthetic(&SyntheticConfig {
            num_sequences: 50,
            seed: data_seed,
            ..Default::default()
        })
        .unwrap();
        let splits = (0..50)
            .map(|i| if i < 40 { Split::Train } else { Split::Val })
            .collect();
        let ds = Dataset::with_splits(seqs, splits);
        let mut taus: Vec<f64> = [1u64, 2, 3]
            .iter()
            .map(|&seed| {
                let mut cfg = TrainConfig::new(LossKind::TccRegression, 16);
                cfg.steps = 2000;
                cfg.seed = seed;
                let report = train(&cfg, &ds, None).unwrap();
                evaluate(&report.state.params, &ds, Split::Val, &EvalConfig::alignment_only())
                    .unwrap()
                    .kendalls_tau
                    .unwrap()
            })
            .collect();
        taus.sort_by(f64::total_cmp);
        println!("data_seed={data_seed} tau={taus:.4?} median={:.4}", taus[1]);
    }
}
