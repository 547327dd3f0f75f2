//! Universality study: how often stored fooling images land on their target
//! class across classifiers that never saw them.
//!
//! ```text
//! cargo run --example transfer_matrix -- <fooling-dir> <victim.ffcls>...
//! ```
//!
//! Prints one row per fooling method with the per-victim hit rate and the
//! cross-victim mean, ordered by that mean.

use std::path::PathBuf;

use foolforge::fooling::{load_fooling_image, FoolingImage, FoolingMethod};
use foolforge::victims::{load_classifier, Classifier};

fn load_images(dir: &PathBuf) -> Vec<FoolingImage> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .expect("fooling dir")
        .filter_map(|e| {
            let name = e.ok()?.file_name().to_string_lossy().into_owned();
            if name.starts_with("manifest-") {
                return None;
            }
            name.strip_suffix(".toml").map(str::to_string)
        })
        .collect();
    stems.sort();
    stems
        .iter()
        .map(|stem| load_fooling_image(dir, stem).expect("fooling image"))
        .collect()
}

fn hit_rate(images: &[&FoolingImage], victim: &Classifier) -> f64 {
    let hits = images
        .iter()
        .filter(|img| {
            let s = img.image.shape();
            let batch = img.image.reshaped(&[1, s[0], s[1], s[2]]).expect("batch");
            let labels = victim.predict_labels(&batch).expect("prediction");
            labels[0] == img.target
        })
        .count();
    hits as f64 / images.len() as f64
}

fn main() {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let dir = args
        .next()
        .expect("usage: transfer_matrix <fooling-dir> <victim.ffcls>...");
    let victims: Vec<Classifier> = args.map(|p| load_classifier(&p).expect("victim")).collect();
    assert!(!victims.is_empty(), "need at least one victim checkpoint");

    let images = load_images(&dir);
    let mut rows: Vec<(FoolingMethod, Vec<f64>, f64)> = FoolingMethod::ALL
        .into_iter()
        .filter_map(|method| {
            let group: Vec<&FoolingImage> =
                images.iter().filter(|i| i.method == method).collect();
            if group.is_empty() {
                return None;
            }
            let rates: Vec<f64> = victims.iter().map(|v| hit_rate(&group, v)).collect();
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            Some((method, rates, mean))
        })
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2));

    print!("{:>10}", "method");
    for v in &victims {
        print!("{:>12}", v.spec.name);
    }
    println!("{:>12}", "mean");
    for (method, rates, mean) in rows {
        print!("{:>10}", method.to_string());
        for r in rates {
            print!("{:>12.3}", r);
        }
        println!("{:>12.3}", mean);
    }
}
