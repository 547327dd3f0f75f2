//! Trains the full victim zoo on a small corpus and prints the accuracy
//! table. The first architecture is the one fooling images are optimized
//! against; the rest only ever see them at evaluation time.
//!
//! ```text
//! cargo run --example train_victim_zoo -- [out-dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use foolforge::tensor::OptimizerConfig;
use foolforge::victims::{
    oracle_architecture, save_classifier, stock_architectures, synthetic_dataset, train_classifier,
    TrainConfig,
};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/examples/train_victim_zoo"));
    std::fs::create_dir_all(&out).expect("out dir");

    let data = synthetic_dataset(7, 12, 4);
    let config = TrainConfig {
        epochs: 25,
        batch_size: 10,
        optimizer: OptimizerConfig::adam(5e-3),
        seed: 7,
    };

    let mut specs = stock_architectures();
    specs.push(oracle_architecture());

    println!(
        "{:>10} {:>8} {:>11} {:>9} {:>9}",
        "victim", "params", "train_acc", "val_acc", "secs"
    );
    for spec in specs {
        let start = Instant::now();
        let (classifier, report) = train_classifier(&spec, &data, &config).expect("training");
        let n_params: usize = classifier.params.iter().map(|p| p.data().len()).sum();
        println!(
            "{:>10} {:>8} {:>11.4} {:>9.4} {:>9.2}",
            spec.name,
            n_params,
            report.train_accuracy,
            report.val_accuracy,
            start.elapsed().as_secs_f64()
        );
        save_classifier(&classifier, &out.join(format!("{}.ffcls", spec.name))).expect("save");
    }
    println!("\ncheckpoints under {}", out.display());
}
