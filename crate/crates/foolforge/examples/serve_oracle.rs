//! Spins up the black-box prediction service in-process, queries it over
//! real HTTP, and checks wire parity: the label the service returns must
//! match in-process inference on the f32-quantized pixels, every time.
//!
//! ```text
//! cargo run --example serve_oracle
//! ```

use std::error::Error;

use foolforge::eval::BlackBox;
use foolforge::oracle::{serve, OracleClient};
use foolforge::victims::{oracle_architecture, synthetic_dataset, train_classifier, TrainConfig};
use foolforge::tensor::OptimizerConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let data = synthetic_dataset(7, 6, 2);
    let train_cfg = TrainConfig {
        epochs: 12,
        batch_size: 10,
        optimizer: OptimizerConfig::adam(5e-3),
        seed: 7,
    };
    let arch = oracle_architecture();
    println!("training oracle victim {}...", arch.name);
    let (classifier, report) = train_classifier(&arch, &data, &train_cfg)?;
    println!("val accuracy {:.2}", report.val_accuracy);

    // Port 0 lets the OS pick a free port; addr() reports the real one.
    let server = serve(classifier.clone(), "127.0.0.1:0")?;
    println!("listening on {}", server.endpoint());

    let client = OracleClient::new(&server.addr().to_string())?
        .with_class_names(classifier.class_names.clone());

    // The wire hides the architecture: only labels and scores come back.
    let sample = data.val.image(0);
    println!("\ntop-3 for one validation image:");
    for (label, score) in client.query(&sample, 3)? {
        println!("  {label:<10} {score:.4}");
    }

    // Parity: every wire answer agrees with local inference.
    let n = data.val.len();
    let mut agree = 0;
    for i in 0..n {
        let image = data.val.image(i);
        let wire_top1 = client.top1(&image)?;
        let local = classifier.predict_labels(&image.reshaped(&[
            1,
            image.shape()[0],
            image.shape()[1],
            image.shape()[2],
        ])?)?[0];
        if wire_top1 == local {
            agree += 1;
        }
    }
    println!("\nwire vs in-process top-1 agreement: {agree}/{n}");
    assert_eq!(agree, n, "wire answers must match local inference exactly");

    let stats = server.shutdown();
    println!(
        "served {} requests, latency mean {:.2} ms / max {:.2} ms",
        stats.requests, stats.mean_latency_ms, stats.max_latency_ms
    );
    Ok(())
}
