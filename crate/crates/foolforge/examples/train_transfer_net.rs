//! Trains a fooling transfer network on a bank of gradient-CPPN images,
//! then turns held-out photos into adversarial versions and compares their
//! transfer against an iterative FGSM baseline at matched distortion.
//!
//! ```text
//! cargo run --example train_transfer_net
//! ```

use std::error::Error;
use std::time::Instant;

use foolforge::eval::{evaluate_attack, fgsm_at_rmsd, rmsd, AttackScenario};
use foolforge::fooling::{self, FoolingConfig, FoolingMethod};
use foolforge::ftn::{build_representation_bank, train_ftn, FtnConfig};
use foolforge::victims::{
    synthetic_dataset, train_classifier, stock_architectures, TrainConfig, TARGET_CLASS,
};
use foolforge::tensor::OptimizerConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let data = synthetic_dataset(7, 12, 4);
    let train_cfg = TrainConfig {
        epochs: 25,
        batch_size: 10,
        optimizer: OptimizerConfig::adam(5e-3),
        seed: 7,
    };

    let archs = stock_architectures();
    println!("training surrogate {} and held-out victim {}...", archs[0].name, archs[1].name);
    let (surrogate, _) = train_classifier(&archs[0], &data, &train_cfg)?;
    let (held_out, _) = train_classifier(&archs[1], &data, &train_cfg)?;

    // Bank of strong low-frequency fooling images against the surrogate.
    let bank_size: usize = 6;
    println!("generating {bank_size} gradient-CPPN fooling images...");
    let started = Instant::now();
    let mut bank_images = Vec::new();
    for i in 0..bank_size {
        let mut cfg =
            FoolingConfig::for_method(FoolingMethod::CppnGrad, TARGET_CLASS, 40 + i as u64);
        cfg.steps = 384;
        let img = fooling::generate(&surrogate, &cfg)?;
        println!("  image {i}: confidence {:.4}", img.confidence);
        bank_images.push(img);
    }
    println!("bank ready in {:.1}s", started.elapsed().as_secs_f64());

    // The bank doubles as the batch contract: one batch per bank row set.
    let ftn_cfg = FtnConfig {
        enc_channels: (16, 32),
        gamma: 2e-3,
        n_samples: bank_size,
        epochs: 60,
        learning_rate: 2e-3,
        seed: 7,
        ..FtnConfig::default()
    };
    let bank = build_representation_bank(
        &surrogate,
        &bank_images,
        &ftn_cfg.taps.iter().map(String::as_str).collect::<Vec<_>>(),
    )?;

    println!(
        "training transfer net ({} steps/epoch x {} epochs)...",
        data.train.len() / ftn_cfg.n_samples,
        ftn_cfg.epochs
    );
    let started = Instant::now();
    let (model, report) = train_ftn(&ftn_cfg, &surrogate, bank, &data.train)?;
    let first = report.steps.first().expect("at least one step");
    let last = report.steps.last().expect("at least one step");
    println!(
        "trained in {:.1}s; losses (content/representation/tv/total):",
        started.elapsed().as_secs_f64()
    );
    println!(
        "  step {:>5}: {:.4} / {:.4} / {:.4} / {:.4}",
        first.step, first.l_c, first.l_rep, first.l_tv, first.l_total
    );
    println!(
        "  step {:>5}: {:.4} / {:.4} / {:.4} / {:.4}",
        last.step, last.l_c, last.l_rep, last.l_tv, last.l_total
    );

    // Attack the first 16 validation photos.
    let indices: Vec<usize> = (0..16.min(data.val.len())).collect();
    let (sources, _) = data.val.batch(&indices);
    let adversarial = model.forward(&sources)?;
    let raw_rmsd = rmsd(&adversarial, &sources)?;

    // FGSM on the same surrogate, bisected to the same distortion.
    let calibrated = fgsm_at_rmsd(&surrogate, &sources, TARGET_CLASS, 10, raw_rmsd, 0.05, 16)?;

    let victims = [&surrogate, &held_out];
    let scenarios = [
        AttackScenario {
            method: "ftn_cppn_grad",
            adversarial: &adversarial,
            sources: &sources,
            target: TARGET_CLASS,
            seed: 7,
        },
        AttackScenario {
            method: "fgsm",
            adversarial: &calibrated.adversarial,
            sources: &sources,
            target: TARGET_CLASS,
            seed: 7,
        },
    ];

    println!(
        "\n{:<16} {:<12} {:>6} {:>10} {:>10}",
        "method", "victim", "rate", "rmsd", "rtd"
    );
    for scenario in &scenarios {
        let report = evaluate_attack(scenario, &victims, None)?;
        for row in &report.rows {
            let rtd = row.rtd.map_or_else(|| "-".into(), |v| format!("{v:.2}"));
            println!(
                "{:<16} {:<12} {:>6.3} {:>10.2} {:>10}",
                row.method, row.victim, row.transfer_rate, row.rmsd, rtd
            );
        }
    }
    println!(
        "\nboth attacks sit at rmsd ~{:.2}/255; the transfer net was trained once and \
         maps any photo in one forward pass",
        raw_rmsd * 255.0
    );
    Ok(())
}
