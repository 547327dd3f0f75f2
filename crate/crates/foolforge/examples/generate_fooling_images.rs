//! Generates one universal fooling image per method against a freshly
//! trained victim, exports PNGs, and prints each generator's confidence
//! trajectory endpoints plus the high-frequency energy of its result.
//!
//! The energy column is the point: unconstrained ascent produces static-like
//! noise, while the transformation-robust, decay-regularized and CPPN
//! parameterizations concentrate energy in low frequencies.
//!
//! ```text
//! cargo run --example generate_fooling_images -- [out-dir]
//! ```

use std::path::PathBuf;

use foolforge::fooling::{
    export_png, generate, high_freq_energy, save_fooling_image, FoolingConfig, FoolingMethod,
};
use foolforge::tensor::OptimizerConfig;
use foolforge::victims::{synthetic_dataset, train_architecture, train_classifier, TrainConfig};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/examples/generate_fooling_images"));
    std::fs::create_dir_all(&out).expect("out dir");

    let data = synthetic_dataset(7, 10, 3);
    let train_cfg = TrainConfig {
        epochs: 25,
        batch_size: 10,
        optimizer: OptimizerConfig::adam(5e-3),
        seed: 7,
    };
    let (victim, _) = train_classifier(&train_architecture(), &data, &train_cfg).expect("victim");

    let target = foolforge::victims::TARGET_CLASS;
    println!(
        "target class: {} ({})\n",
        target, data.class_names[target]
    );
    println!(
        "{:>10} {:>7} {:>12} {:>12} {:>10}",
        "method", "steps", "first_conf", "final_conf", "hf_energy"
    );
    for method in FoolingMethod::ALL {
        let mut cfg = FoolingConfig::for_method(method, target, 7);
        cfg.steps = match method {
            FoolingMethod::CppnEa => 60,
            _ => 256,
        };
        let image = generate(&victim, &cfg).expect("generation");
        let energy = high_freq_energy(&image.image).expect("spectrum");
        println!(
            "{:>10} {:>7} {:>12.4} {:>12.4} {:>10.4}",
            method.to_string(),
            image.trace.len(),
            image.trace.first().map(|t| t.confidence).unwrap_or(0.0),
            image.confidence,
            energy
        );
        let stem = format!("{method}-demo");
        save_fooling_image(&out, &stem, &image).expect("save");
        export_png(&image.image, &out.join(format!("{stem}.png"))).expect("png");
    }
    println!("\nimages, sidecars, traces and PNGs under {}", out.display());
}
