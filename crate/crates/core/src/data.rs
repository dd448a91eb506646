//! Datasets: MNIST IDX files, seeded Gaussian blobs, and shuffled batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Shape;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Features in `[0, 1]`, channel-major.
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub shape: Shape,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize, shape: Shape) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.label >= classes {
                return Err(Error::validation("dataset", format!("sample {i}: label {} >= {classes}", s.label)));
            }
            if s.features.len() != shape.len() {
                return Err(Error::validation("dataset", format!("sample {i}: {} features, shape needs {}", s.features.len(), shape.len())));
            }
            if s.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation("dataset", format!("sample {i}: feature outside [0, 1]")));
            }
        }
        Ok(Dataset { samples, classes, shape })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            classes: self.classes,
            shape: self.shape,
        }
    }

    /// Plain-text table: a header, then `label f1 f2 ...` per sample with
    /// 17 significant digits so that parsing it back is exact.
    pub fn to_table(&self) -> String {
        let mut s = format!("# classes {} shape {}\n", self.classes, self.shape);
        for sample in &self.samples {
            s.push_str(&sample.label.to_string());
            for f in &sample.features {
                s.push_str(&format!(" {f:.16e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_table(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .split_whitespace()
            .collect();
        let (classes, shape) = match header.as_slice() {
            ["#", "classes", c, "shape", ch, h, w] => {
                let p = |t: &str| t.parse::<usize>().map_err(|_| bad("bad header".into()));
                (p(c)?, Shape::new(p(ch)?, p(h)?, p(w)?))
            }
            _ => return Err(bad("bad header".into())),
        };
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut tok = line.split_whitespace();
            let label = tok
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| bad(format!("line {}: bad label", n + 2)))?;
            let features = tok
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("line {}: bad feature", n + 2))))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { features, label });
        }
        Dataset::new(samples, classes, shape).map_err(|e| bad(e.to_string()))
    }

    pub fn save_table(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_table(&text, path)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixel bytes are scaled by `1/255`. The class count is `max label + 1`
/// (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = be_u32(&images, 0).ok_or_else(|| Error::format(images_path, "file shorter than its header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, format!("bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (count, rows, cols) = match (be_u32(&images, 4), be_u32(&images, 8), be_u32(&images, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(Error::format(images_path, "file shorter than its header")),
    };
    let pixels = rows * cols;
    if images.len() != 16 + count * pixels {
        return Err(Error::format(
            images_path,
            format!("payload of {} bytes, header promises {}", images.len().saturating_sub(16), count * pixels),
        ));
    }

    let magic = be_u32(&labels, 0).ok_or_else(|| Error::format(labels_path, "file shorter than its header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, format!("bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = be_u32(&labels, 4).ok_or_else(|| Error::format(labels_path, "file shorter than its header"))? as usize;
    if labels.len() != 8 + label_count {
        return Err(Error::format(
            labels_path,
            format!("payload of {} bytes, header promises {label_count}", labels.len().saturating_sub(8)),
        ));
    }
    if label_count != count {
        return Err(Error::format(labels_path, format!("{label_count} labels for {count} images")));
    }

    let classes = labels[8..].iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    let samples = images[16..]
        .chunks_exact(pixels.max(1))
        .zip(&labels[8..])
        .map(|(px, &l)| Sample {
            features: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: l as usize,
        })
        .collect();
    Ok(Dataset {
        samples,
        classes,
        shape: Shape::new(1, rows, cols),
    })
}

/// Gaussian clusters around seeded class centers, clipped to `[0, 1]^dim`.
/// Samples are ordered class by class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::validation("blobs", "need at least two classes"));
    }
    if dim == 0 || !(spread >= 0.0) {
        return Err(Error::validation("blobs", "dimension must be positive and spread non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Rejection-sample centers in [0.2, 0.8]^dim, relaxing the separation if
    // the space is too crowded.
    let mut min_sep: f64 = 0.3;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..0.8)).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_sep
        });
        if ok {
            centers.push(c);
        }
        attempts += 1;
        if attempts % 1000 == 0 {
            min_sep *= 0.8;
        }
    }
    let mut samples = Vec::with_capacity(classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + spread * z).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Ok(Dataset {
        samples,
        classes,
        shape: Shape::flat(dim),
    })
}

/// Seeded shuffle of `0..len` cut into batches of `batch_size` (the last may
/// be short). Every index appears exactly once.
pub fn batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
