//! On-disk form of fooling images: tensor container, structured-text
//! sidecar, per-step trace CSV, and a PNG export for inspection.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_tensor, write_tensor, Tensor};

use super::{FoolingError, FoolingImage, FoolingMethod, TracePoint};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    method: FoolingMethod,
    target: usize,
    confidence: f64,
    seed: u64,
}

fn store_err(path: &Path, err: impl std::fmt::Display) -> FoolingError {
    FoolingError::Store {
        msg: format!("{}: {err}", path.display()),
    }
}

/// Writes `{stem}.fftn`, `{stem}.toml` and `{stem}.trace.csv` under `dir`.
pub fn save_fooling_image(
    dir: &Path,
    stem: &str,
    image: &FoolingImage,
) -> Result<(), FoolingError> {
    fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;

    let tensor_path = dir.join(format!("{stem}.fftn"));
    let mut w = BufWriter::new(File::create(&tensor_path).map_err(|e| store_err(&tensor_path, e))?);
    write_tensor(&mut w, &image.image)?;

    let sidecar = Sidecar {
        method: image.method,
        target: image.target,
        confidence: image.confidence,
        seed: image.seed,
    };
    let meta_path = dir.join(format!("{stem}.toml"));
    let text = toml::to_string(&sidecar).map_err(|e| store_err(&meta_path, e))?;
    fs::write(&meta_path, text).map_err(|e| store_err(&meta_path, e))?;

    let trace_path = dir.join(format!("{stem}.trace.csv"));
    let mut csv = String::from("step,loss,confidence\n");
    for t in &image.trace {
        csv.push_str(&format!("{},{},{}\n", t.step, t.loss, t.confidence));
    }
    fs::write(&trace_path, csv).map_err(|e| store_err(&trace_path, e))?;
    Ok(())
}

/// Reads the triple written by [`save_fooling_image`].
pub fn load_fooling_image(dir: &Path, stem: &str) -> Result<FoolingImage, FoolingError> {
    let tensor_path = dir.join(format!("{stem}.fftn"));
    let mut r = BufReader::new(File::open(&tensor_path).map_err(|e| store_err(&tensor_path, e))?);
    let image = read_tensor(&mut r)?;

    let meta_path = dir.join(format!("{stem}.toml"));
    let text = fs::read_to_string(&meta_path).map_err(|e| store_err(&meta_path, e))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| store_err(&meta_path, e))?;

    let trace_path = dir.join(format!("{stem}.trace.csv"));
    let csv = fs::read_to_string(&trace_path).map_err(|e| store_err(&trace_path, e))?;
    let trace = parse_trace(&csv).map_err(|e| store_err(&trace_path, e))?;

    Ok(FoolingImage {
        image,
        method: sidecar.method,
        target: sidecar.target,
        confidence: sidecar.confidence,
        trace,
        seed: sidecar.seed,
    })
}

fn parse_trace(csv: &str) -> Result<Vec<TracePoint>, String> {
    let mut lines = csv.lines();
    match lines.next() {
        Some("step,loss,confidence") => {}
        other => return Err(format!("bad trace header {other:?}")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = || cols.next().ok_or_else(|| format!("row {i} too short"));
        let step = next()?.parse::<usize>().map_err(|e| format!("row {i}: {e}"))?;
        let loss = next()?.parse::<f64>().map_err(|e| format!("row {i}: {e}"))?;
        let confidence = next()?.parse::<f64>().map_err(|e| format!("row {i}: {e}"))?;
        out.push(TracePoint { step, loss, confidence });
    }
    Ok(out)
}

/// Quantizes a `[c, h, w]` image in [0, 1] to an 8-bit PNG; one channel
/// saves as grayscale, three as RGB.
pub fn export_png(image: &Tensor, path: &Path) -> Result<(), FoolingError> {
    if image.rank() != 3 {
        return Err(FoolingError::Store {
            msg: format!("png export expects [c, h, w], got {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data = image.data();
    match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quant(data[(y as usize) * w + x as usize])])
            });
            buf.save(path).map_err(|e| store_err(path, e))
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |ch: usize| quant(data[(ch * h + y as usize) * w + x as usize]);
                image::Rgb([at(0), at(1), at(2)])
            });
            buf.save(path).map_err(|e| store_err(path, e))
        }
        other => Err(FoolingError::Store {
            msg: format!("png export supports 1 or 3 channels, got {other}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::tiny_victim;
    use super::super::{fool_naive, FoolingConfig, FoolingMethod};
    use super::*;

    fn sample_image() -> FoolingImage {
        let victim = tiny_victim(1);
        let cfg = FoolingConfig {
            steps: 3,
            stop_confidence: None,
            ..FoolingConfig::for_method(FoolingMethod::Naive, 2, 5)
        };
        fool_naive(&victim, &cfg).unwrap()
    }

    #[test]
    fn save_and_load_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        save_fooling_image(dir.path(), "probe", &img).unwrap();
        let back = load_fooling_image(dir.path(), "probe").unwrap();
        assert_eq!(back.image, img.image);
        assert_eq!(back.method, img.method);
        assert_eq!(back.target, img.target);
        assert_eq!(back.confidence.to_bits(), img.confidence.to_bits());
        assert_eq!(back.seed, img.seed);
        assert_eq!(back.trace.len(), img.trace.len());
        for (a, b) in back.trace.iter().zip(&img.trace) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
        }
    }

    #[test]
    fn png_export_writes_a_decodable_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        let path = dir.path().join("probe.png");
        export_png(&img.image, &path).unwrap();
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (12, 12));
        let expected = (img.image.data()[0].clamp(0.0, 1.0) * 255.0).round() as u8;
        assert_eq!(decoded.get_pixel(0, 0)[0], expected);
    }

    #[test]
    fn loading_a_missing_stem_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_fooling_image(dir.path(), "absent").unwrap_err();
        assert!(err.to_string().contains("absent.fftn"));
    }

    #[test]
    fn trace_with_a_foreign_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample_image();
        save_fooling_image(dir.path(), "probe", &img).unwrap();
        std::fs::write(dir.path().join("probe.trace.csv"), "a,b\n1,2\n").unwrap();
        let err = load_fooling_image(dir.path(), "probe").unwrap_err();
        assert!(err.to_string().contains("header"));
    }
}
