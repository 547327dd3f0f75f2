//! Renders one CPPN genome at several resolutions. The genome is a tiny
//! coordinate network, so the same parameters paint a 32-pixel thumbnail or
//! a poster-sized image of the identical pattern; regular geometric texture
//! is exactly why those images survive transfer between classifiers.
//!
//! ```text
//! cargo run --example cppn_patterns -- [out-dir]
//! ```

use std::path::PathBuf;

use foolforge::fooling::{export_png, CppnGenome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/examples/cppn_patterns"));
    std::fs::create_dir_all(&out).expect("out dir");

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let genome = CppnGenome::random(&mut rng, &[12, 12]);
    println!("genome widths: {:?}", genome.widths());

    for side in [32usize, 96, 256] {
        let image = genome.render(side, side).expect("render");
        let path = out.join(format!("pattern-{side}.png"));
        export_png(&image, &path).expect("png");
        println!("rendered {side}x{side} -> {}", path.display());
    }

    // The pattern is resolution independent: sampling the large render at
    // the small render's grid centers reproduces it almost exactly.
    let small = genome.render(32, 32).expect("render");
    let large = genome.render(256, 256).expect("render");
    let mut worst = 0.0f64;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let sy = y * 8 + 4;
                let sx = x * 8 + 4;
                let a = small.data()[(c * 32 + y) * 32 + x];
                let b = large.data()[(c * 256 + sy) * 256 + sx];
                worst = worst.max((a - b).abs());
            }
        }
    }
    println!("max |32px - resampled 256px| at grid centers: {worst:.4}");
}
