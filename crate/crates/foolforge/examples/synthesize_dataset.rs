//! Builds the procedural ten-class corpus, saves it as an archive, and
//! verifies the reload path reproduces the content hash bit for bit.
//!
//! ```text
//! cargo run --example synthesize_dataset -- [out-dir]
//! ```

use std::path::PathBuf;

use foolforge::victims::{load_dataset, save_dataset, synthetic_dataset};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/examples/synthesize_dataset"));
    std::fs::create_dir_all(&out).expect("out dir");

    let data = synthetic_dataset(7, 8, 3);
    println!(
        "corpus: {} train / {} val images of shape {:?}",
        data.train.len(),
        data.val.len(),
        &data.train.images.shape()[1..],
    );
    println!("classes: {}", data.class_names.join(", "));

    // Per-class pixel means show the renderer keeps classes distinguishable.
    println!("\n{:>10} {:>8} {:>8}", "class", "count", "mean");
    for (k, name) in data.class_names.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        let stride: usize = data.train.images.shape()[1..].iter().product();
        for (i, &label) in data.train.labels.iter().enumerate() {
            if label == k {
                sum += data.train.images.data()[i * stride..(i + 1) * stride]
                    .iter()
                    .sum::<f64>();
                count += 1;
            }
        }
        println!(
            "{:>10} {:>8} {:>8.4}",
            name,
            count,
            sum / (count * stride) as f64
        );
    }

    let path = out.join("dataset.ffdat");
    save_dataset(&data, &path).expect("save");
    let back = load_dataset(&path).expect("load");
    assert_eq!(back.hash, data.hash, "reload must reproduce the hash");
    println!("\nsaved {} (sha256 {})", path.display(), &data.hash[..16]);
}
