//! Image corpora: a procedural 10-class shapes dataset and a CIFAR-10
//! binary-batch reader.
//!
//! Synthetic images are 32x32 RGB in [0, 1]. Class identity is carried by
//! shape alone; foreground/background colors, pose and noise are randomized
//! per image from an RNG derived from (seed, split, index), so any image can
//! be regenerated independently of iteration order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{sha256_hex, Tensor};

use super::VictimError;

pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;

/// Class names in label order. `star` (label 1) is the default attack target.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "circle", "star", "hstripes", "vstripes", "checker", "ring", "cross", "triangle", "dots",
    "diamond",
];

/// Default target class for attacks: the five-armed star.
pub const TARGET_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One split of labeled images, NCHW in [0, 1].
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy of one image as `[c, h, w]`.
    pub fn image(&self, index: usize) -> Tensor {
        let s = self.images.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let stride = c * h * w;
        Tensor::new(
            &[c, h, w],
            self.images.data()[index * stride..(index + 1) * stride].to_vec(),
        )
        .expect("sized")
    }

    /// Stacks the selected indices into an NCHW batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let stride = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(&[indices.len(), s[1], s[2], s[3]], data).expect("sized"),
            labels,
        )
    }
}

/// Train/val corpus with its provenance hash.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub class_names: Vec<String>,
    pub num_classes: usize,
    pub seed: u64,
    pub hash: String,
}

impl Dataset {
    /// SHA-256 over both splits' pixels and labels; identifies the corpus in
    /// fingerprints and manifests.
    fn compute_hash(train: &DatasetSplit, val: &DatasetSplit, seed: u64) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&seed.to_le_bytes());
        for split in [train, val] {
            for v in split.images.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for &l in &split.labels {
                bytes.extend_from_slice(&(l as u64).to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// SplitMix64; decorrelates per-image seeds derived from the corpus seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 0x5452u64,
        Split::Val => 0x564cu64,
    };
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ tag.rotate_left(48) ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15),
    ))
}

/// Generates the procedural corpus. Labels cycle through the classes so
/// every batch prefix is balanced.
pub fn synthetic_dataset(seed: u64, per_class_train: usize, per_class_val: usize) -> Dataset {
    let make = |split: Split, per_class: usize| {
        let n = per_class * NUM_CLASSES;
        let mut images = Tensor::zeros(&[n, 3, IMAGE_SIDE, IMAGE_SIDE]);
        let mut labels = Vec::with_capacity(n);
        let stride = 3 * IMAGE_SIDE * IMAGE_SIDE;
        for i in 0..n {
            let class = i % NUM_CLASSES;
            let mut rng = image_rng(seed, split, i);
            let img = render_class(class, &mut rng);
            images.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(img.data());
            labels.push(class);
        }
        DatasetSplit {
            images,
            labels,
            split,
        }
    };
    let train = make(Split::Train, per_class_train);
    let val = make(Split::Val, per_class_val);
    let hash = Dataset::compute_hash(&train, &val, seed);
    Dataset {
        train,
        val,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        num_classes: NUM_CLASSES,
        seed,
        hash,
    }
}

/// Renders one image of the given class.
pub fn render_class(class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (fg, bg) = contrasting_colors(rng);
    let side = IMAGE_SIDE as f64;
    // Pose shared by the blob-like classes.
    let cx = side / 2.0 + rng.random_range(-4.8..4.8);
    let cy = side / 2.0 + rng.random_range(-4.8..4.8);
    let radius = rng.random_range(8.0..12.5);
    let rot = rng.random_range(0.0..std::f64::consts::TAU);
    // Pattern-class knobs.
    let period = rng.random_range(5.0..9.0);
    let phase = rng.random_range(0.0..period);

    let mut img = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            // Rotate into shape frame.
            let (sr, cr) = rot.sin_cos();
            let rx = cr * (px - cx) + sr * (py - cy);
            let ry = -sr * (px - cx) + cr * (py - cy);
            let coverage = match class {
                0 => aa(sd_circle(rx, ry, radius)),
                1 => aa(sd_star5(rx, ry, radius, 0.45)),
                2 => stripe_coverage(py, period, phase),
                3 => stripe_coverage(px, period, phase),
                4 => checker_coverage(px, py, period, phase),
                5 => aa(sd_ring(rx, ry, radius, radius * 0.3)),
                6 => aa(sd_cross(rx, ry, radius, radius * 0.34)),
                7 => aa(sd_triangle(rx, ry, radius)),
                8 => dot_coverage(px, py, period + 2.0, phase),
                9 => aa(rx.abs() + ry.abs() - radius),
                _ => unreachable!("class out of range"),
            };
            for c in 0..3 {
                let v = bg[c] * (1.0 - coverage) + fg[c] * coverage;
                let noisy = v + rng.random_range(-0.02..0.02);
                img.data_mut()[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Foreground/background pair with guaranteed channel-space separation.
fn contrasting_colors(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let draw = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    };
    let fg = draw(rng);
    for _ in 0..64 {
        let bg = draw(rng);
        let d2: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 > 0.55 {
            return (fg, bg);
        }
    }
    (fg, [1.0 - fg[0], 1.0 - fg[1], 1.0 - fg[2]])
}

/// Signed distance to coverage with a ~1.2 px antialiasing band.
fn aa(d: f64) -> f64 {
    (0.5 - d / 1.2).clamp(0.0, 1.0)
}

fn sd_circle(x: f64, y: f64, r: f64) -> f64 {
    (x * x + y * y).sqrt() - r
}

fn sd_ring(x: f64, y: f64, r: f64, width: f64) -> f64 {
    ((x * x + y * y).sqrt() - r).abs() - width
}

/// Five-armed star (inner radius factor `rf`).
fn sd_star5(x: f64, y: f64, r: f64, rf: f64) -> f64 {
    let k1 = (0.809016994375, -0.587785252292);
    let k2 = (-k1.0, k1.1);
    let mut p = (x.abs(), y);
    let d1 = 2.0 * (k1.0 * p.0 + k1.1 * p.1).max(0.0);
    p = (p.0 - d1 * k1.0, p.1 - d1 * k1.1);
    let d2 = 2.0 * (k2.0 * p.0 + k2.1 * p.1).max(0.0);
    p = (p.0 - d2 * k2.0, p.1 - d2 * k2.1);
    p = (p.0.abs(), p.1 - r);
    let ba = (rf * -k1.1 - 0.0, rf * k1.0 - 1.0);
    let h = ((p.0 * ba.0 + p.1 * ba.1) / (ba.0 * ba.0 + ba.1 * ba.1)).clamp(0.0, r);
    let dx = p.0 - ba.0 * h;
    let dy = p.1 - ba.1 * h;
    (dx * dx + dy * dy).sqrt() * (p.1 * ba.0 - p.0 * ba.1).signum()
}

fn sd_box(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let dx = x.abs() - hx;
    let dy = y.abs() - hy;
    let ox = dx.max(0.0);
    let oy = dy.max(0.0);
    (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
}

fn sd_cross(x: f64, y: f64, arm: f64, width: f64) -> f64 {
    sd_box(x, y, arm, width).min(sd_box(x, y, width, arm))
}

fn sd_triangle(x: f64, y: f64, r: f64) -> f64 {
    let k = 3f64.sqrt();
    let mut p = (x.abs() - r, y + r / k);
    if p.0 + k * p.1 > 0.0 {
        p = ((p.0 - k * p.1) / 2.0, (-k * p.0 - p.1) / 2.0);
    }
    p.0 -= p.0.clamp(-2.0 * r, 0.0);
    -(p.0 * p.0 + p.1 * p.1).sqrt() * p.1.signum()
}

fn stripe_coverage(coord: f64, period: f64, phase: f64) -> f64 {
    let t = (coord + phase).rem_euclid(period) / period;
    // Half-duty band with a soft edge.
    let d = (t - 0.5).abs() - 0.25;
    (0.5 - d * period / 1.2).clamp(0.0, 1.0)
}

fn checker_coverage(px: f64, py: f64, period: f64, phase: f64) -> f64 {
    let cx = ((px + phase) / period).floor() as i64;
    let cy = ((py + phase) / period).floor() as i64;
    if (cx + cy).rem_euclid(2) == 0 {
        1.0
    } else {
        0.0
    }
}

fn dot_coverage(px: f64, py: f64, cell: f64, phase: f64) -> f64 {
    let lx = (px + phase).rem_euclid(cell) - cell / 2.0;
    let ly = (py + phase).rem_euclid(cell) - cell / 2.0;
    aa(sd_circle(lx, ly, cell * 0.3))
}

const DATASET_KIND: &str = "dataset";

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetHeader {
    class_names: Vec<String>,
    num_classes: usize,
    seed: u64,
    train_labels: Vec<usize>,
    val_labels: Vec<usize>,
}

/// Writes a corpus as one checksummed archive.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<(), VictimError> {
    let header = DatasetHeader {
        class_names: data.class_names.clone(),
        num_classes: data.num_classes,
        seed: data.seed,
        train_labels: data.train.labels.clone(),
        val_labels: data.val.labels.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| VictimError::Dataset {
        msg: format!("header encode: {e}"),
    })?;
    let table = toml::from_str(&text).map_err(|e| VictimError::Dataset {
        msg: format!("header re-parse: {e}"),
    })?;
    let mut archive = crate::tensor::Archive::new(DATASET_KIND, table);
    archive.push("train.images", data.train.images.clone());
    archive.push("val.images", data.val.images.clone());
    crate::tensor::write_archive(path, &archive)?;
    Ok(())
}

/// Reads a corpus written by [`save_dataset`], recomputing the provenance
/// hash from the stored pixels and labels.
pub fn load_dataset(path: &Path) -> Result<Dataset, VictimError> {
    let archive = crate::tensor::read_archive(path)?;
    if archive.kind != DATASET_KIND {
        return Err(VictimError::Dataset {
            msg: format!("expected kind {DATASET_KIND}, found {}", archive.kind),
        });
    }
    let header: DatasetHeader = toml::Value::Table(archive.header.clone())
        .try_into()
        .map_err(|e| VictimError::Dataset {
            msg: format!("header decode: {e}"),
        })?;
    let take = |name: &str, labels: &[usize], split: Split| -> Result<DatasetSplit, VictimError> {
        let images = archive.tensor(name).ok_or_else(|| VictimError::Dataset {
            msg: format!("missing tensor {name}"),
        })?;
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(VictimError::Dataset {
                msg: format!(
                    "{name}: shape {:?} does not match {} labels",
                    images.shape(),
                    labels.len()
                ),
            });
        }
        Ok(DatasetSplit {
            images: images.clone(),
            labels: labels.to_vec(),
            split,
        })
    };
    let train = take("train.images", &header.train_labels, Split::Train)?;
    let val = take("val.images", &header.val_labels, Split::Val)?;
    let hash = Dataset::compute_hash(&train, &val, header.seed);
    Ok(Dataset {
        train,
        val,
        class_names: header.class_names,
        num_classes: header.num_classes,
        seed: header.seed,
        hash,
    })
}

/// Reads CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`) from
/// a directory. `limit_*` caps how many records are kept per split.
pub fn load_cifar10(
    dir: &Path,
    limit_train: usize,
    limit_val: usize,
) -> Result<Dataset, VictimError> {
    const RECORD: usize = 3073;
    let read_split = |files: &[std::path::PathBuf], limit: usize, split: Split| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        'outer: for f in files {
            let bytes = std::fs::read(f).map_err(|e| VictimError::Dataset {
                msg: format!("{}: {e}", f.display()),
            })?;
            if bytes.len() % RECORD != 0 {
                return Err(VictimError::Dataset {
                    msg: format!("{}: not a multiple of {RECORD} bytes", f.display()),
                });
            }
            for rec in bytes.chunks_exact(RECORD) {
                if labels.len() >= limit {
                    break 'outer;
                }
                let label = rec[0] as usize;
                if label >= NUM_CLASSES {
                    return Err(VictimError::Dataset {
                        msg: format!("label {label} out of range in {}", f.display()),
                    });
                }
                labels.push(label);
                data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
            }
        }
        if labels.is_empty() {
            return Err(VictimError::Dataset {
                msg: "no records read".into(),
            });
        }
        let n = labels.len();
        Ok(DatasetSplit {
            images: Tensor::new(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], data).expect("sized"),
            labels,
            split,
        })
    };

    let train_files: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.exists())
        .collect();
    let val_file = dir.join("test_batch.bin");
    if train_files.is_empty() || !val_file.exists() {
        return Err(VictimError::Dataset {
            msg: format!("no CIFAR-10 batches under {}", dir.display()),
        });
    }
    let train = read_split(&train_files, limit_train, Split::Train)?;
    let val = read_split(std::slice::from_ref(&val_file), limit_val, Split::Val)?;
    let hash = Dataset::compute_hash(&train, &val, 0);
    Ok(Dataset {
        train,
        val,
        class_names: [
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        num_classes: NUM_CLASSES,
        seed: 0,
        hash,
    })
}
