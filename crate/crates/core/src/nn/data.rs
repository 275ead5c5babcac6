//! Datasets: IDX (MNIST-style) files and seeded synthetic tasks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!("label {bad} >= {num_classes} classes")));
        }
        if !inputs.is_finite() {
            return Err(Error::Validation("dataset inputs contain non-finite values".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split: Split::Train,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, labels) = self.batch(&idx);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Raw IDX array: dimension sizes and unsigned byte payload.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Format(format!("unsupported IDX magic {other:#010x}"))),
    };
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 * (ndims + 1);
    let n: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: payload[..n].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_idx(&bytes)
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]` and each
/// image becomes a `1 × rows × cols` sample.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.magic != IDX_IMAGES_MAGIC || lab.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format("expected an image file and a label file".into()));
    }
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Format(format!("{n} images but {} labels", lab.dims[0])));
    }
    let inputs = Tensor::new(
        vec![n, 1, rows, cols],
        img.data.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lab.data.iter().map(|&y| usize::from(y)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset::new(inputs, labels, classes)?.with_split(split))
}

/// Encodes a labelled image set in IDX form (used by tests and examples).
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Isotropic Gaussian clusters with centers evenly spaced on a circle.
    Blobs,
    /// Two interleaving half circles.
    Moons,
    /// Standard normal features with uniformly random labels.
    Random,
    /// Single-channel images of oriented stripe patterns, up to 4 classes.
    Stripes,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "moons" => Ok(SynthKind::Moons),
            "random" => Ok(SynthKind::Random),
            "stripes" => Ok(SynthKind::Stripes),
            other => Err(Error::Config(format!("unknown synthetic dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    /// Feature count for `blobs` and `random`, image side for `stripes`.
    pub size: usize,
    /// Noise scale; `None` uses the kind's default.
    pub noise: Option<f64>,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, seed: u64, n: usize, classes: usize) -> Self {
        let size = match kind {
            SynthKind::Blobs => 2,
            SynthKind::Moons => 2,
            SynthKind::Random => 8,
            SynthKind::Stripes => 8,
        };
        SynthSpec {
            kind,
            n,
            classes,
            seed,
            size,
            noise: None,
        }
    }
}

/// Seeded synthetic dataset. Train and test splits share the task and
/// draw samples from independent streams.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic tasks need at least 2 classes".into()));
    }
    let stream = spec.seed.wrapping_mul(2).wrapping_add(matches!(split, Split::Test) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, k) = (spec.n, spec.classes);
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let shape = match spec.kind {
        SynthKind::Blobs => {
            let d = spec.size.max(2);
            let sigma = spec.noise.unwrap_or(0.5);
            for i in 0..n {
                let y = i % k;
                let angle = 2.0 * PI * y as f64 / k as f64;
                for j in 0..d {
                    let center = match j {
                        0 => 4.0 * angle.cos(),
                        1 => 4.0 * angle.sin(),
                        _ => 0.0,
                    };
                    data.push(center + sigma * normal.sample(&mut rng));
                }
                labels.push(y);
            }
            vec![n, d]
        }
        SynthKind::Moons => {
            if k != 2 {
                return Err(Error::Config("moons is a 2-class task".into()));
            }
            let sigma = spec.noise.unwrap_or(0.1);
            for i in 0..n {
                let y = i % 2;
                let t = PI * rng.gen::<f64>();
                let (px, py) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(px + sigma * normal.sample(&mut rng));
                data.push(py + sigma * normal.sample(&mut rng));
                labels.push(y);
            }
            vec![n, 2]
        }
        SynthKind::Random => {
            for _ in 0..n {
                for _ in 0..spec.size {
                    data.push(normal.sample(&mut rng));
                }
                labels.push(rng.gen_range(0..k));
            }
            vec![n, spec.size]
        }
        SynthKind::Stripes => {
            if k > 4 {
                return Err(Error::Config("stripes supports at most 4 classes".into()));
            }
            let s = spec.size;
            let sigma = spec.noise.unwrap_or(0.6);
            for i in 0..n {
                let y = i % k;
                let period = rng.gen_range(2.5..4.5);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = rng.gen_range(0.6..1.2);
                for r in 0..s {
                    for c in 0..s {
                        let coord = match y {
                            0 => r as f64,
                            1 => c as f64,
                            2 => (r + c) as f64 / 2f64.sqrt(),
                            _ => (r as f64 - c as f64) / 2f64.sqrt(),
                        };
                        let v = amp * (2.0 * PI * coord / period + phase).cos();
                        data.push(v + sigma * normal.sample(&mut rng));
                    }
                }
                labels.push(y);
            }
            vec![n, 1, s, s]
        }
    };
    Ok(Dataset::new(Tensor::new(shape, data)?, labels, k)?.with_split(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_images_and_labels() {
        let images = vec![vec![0u8; 784], vec![255u8; 784]];
        let (img, lab) = encode_idx(&images, 28, 28, &[3, 7]);
        let arr = parse_idx(&img).unwrap();
        assert_eq!(arr.dims, vec![2, 28, 28]);
        assert_eq!(arr.data.len(), 2 * 784);

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[1, 28, 28]);
        assert_eq!(ds.inputs.sample(1)[0], 1.0);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.split, Split::Test);
    }

    #[test]
    fn idx_format_errors() {
        let (mut img, _) = encode_idx(&[vec![1u8; 4]], 2, 2, &[0]);
        img.truncate(img.len() - 1);
        assert!(matches!(parse_idx(&img), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0, 9, 9, 0, 0, 0, 0]), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format(_))));
        assert!(matches!(read_idx("/nonexistent/file.idx"), Err(Error::Io { .. })));
    }

    #[test]
    fn synthetic_sets_are_deterministic() {
        let spec = SynthSpec::new(SynthKind::Blobs, 7, 100, 3);
        assert_eq!(synth_dataset(&spec, Split::Train).unwrap(), synth_dataset(&spec, Split::Train).unwrap());
        assert_ne!(
            synth_dataset(&spec, Split::Train).unwrap().inputs,
            synth_dataset(&spec, Split::Test).unwrap().inputs
        );
        let stripes = synth_dataset(&SynthSpec::new(SynthKind::Stripes, 1, 8, 4), Split::Train).unwrap();
        assert_eq!(stripes.sample_shape(), &[1, 8, 8]);
        assert_eq!(stripes.labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(synth_dataset(&SynthSpec::new(SynthKind::Moons, 1, 8, 3), Split::Train).is_err());
    }
}
