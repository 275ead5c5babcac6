use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_idx, synth_dataset, Dataset, Layer, Network, Split, SynthKind, SynthSpec, TrainConfig};
use crate::prune::Strategy;
use crate::reparam::Basis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        task: SynthKind,
        n_train: usize,
        n_test: usize,
        classes: usize,
        size: Option<usize>,
        noise: Option<f64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    Cnn { channels: Vec<usize>, strides: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub data_seed: Option<u64>,
    pub arch: Architecture,
    pub strategy: Strategy,
    pub ratio: f64,
    /// `None` picks 0.95 for one pass and 0.5 when iterating.
    pub cap: Option<f64>,
    pub iterations: usize,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_weight_decay: f64,
    pub damping: f64,
    /// Conv layers under `eigendamage`: channel or patch eigenbasis.
    pub conv_basis: Basis,
    /// Minibatches fed to factor estimation; `None` uses the whole train split.
    pub fisher_batches: Option<usize>,
    pub fisher_batch_size: usize,
    /// Depthwise rank for `decompose`; `None` keeps the full core rank.
    pub rank: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic {
                task: SynthKind::Blobs,
                n_train: 512,
                n_test: 256,
                classes: 4,
                size: None,
                noise: None,
            },
            data_seed: None,
            arch: Architecture::Mlp { hidden: vec![32] },
            strategy: Strategy::EigenDamage,
            ratio: 0.5,
            cap: None,
            iterations: 1,
            train: TrainConfig::default(),
            finetune_epochs: 10,
            finetune_lr: 0.01,
            finetune_weight_decay: 1e-4,
            damping: 1e-6,
            conv_basis: Basis::ConvChannel,
            fisher_batches: None,
            fisher_batch_size: 64,
            rank: None,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// Pending dataset and architecture keys, resolved once all lines are read.
#[derive(Default)]
struct Pending {
    dataset: Option<String>,
    arch: Option<String>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    classes: Option<usize>,
    size: Option<usize>,
    noise: Option<f64>,
    hidden: Option<Vec<usize>>,
    channels: Option<Vec<usize>>,
    strides: Option<Vec<usize>>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `key = value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut p = Pending::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            cfg.set(&mut p, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        cfg.resolve(p)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, p: &mut Pending, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => p.dataset = Some(value.to_string()),
            "n_train" => p.n_train = Some(parse(key, value)?),
            "n_test" => p.n_test = Some(parse(key, value)?),
            "classes" => p.classes = Some(parse(key, value)?),
            "size" => p.size = Some(parse(key, value)?),
            "noise" => p.noise = Some(parse(key, value)?),
            "train_images" => p.train_images = Some(value.into()),
            "train_labels" => p.train_labels = Some(value.into()),
            "test_images" => p.test_images = Some(value.into()),
            "test_labels" => p.test_labels = Some(value.into()),
            "data_seed" => self.data_seed = optional(key, value)?,
            "arch" => p.arch = Some(value.to_string()),
            "hidden" => p.hidden = Some(parse_list(key, value)?),
            "channels" => p.channels = Some(parse_list(key, value)?),
            "strides" => p.strides = Some(parse_list(key, value)?),
            "strategy" => self.strategy = value.parse()?,
            "ratio" => self.ratio = parse(key, value)?,
            "cap" => self.cap = optional(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "finetune_lr" => self.finetune_lr = parse(key, value)?,
            "finetune_weight_decay" => self.finetune_weight_decay = parse(key, value)?,
            "damping" => self.damping = parse(key, value)?,
            "conv_basis" => {
                self.conv_basis = match value {
                    "channel" => Basis::ConvChannel,
                    "patch" => Basis::ConvPatch,
                    other => return Err(Error::Config(format!("conv_basis must be channel or patch, got {other:?}"))),
                }
            }
            "fisher_batches" => self.fisher_batches = optional(key, value)?,
            "fisher_batch_size" => self.fisher_batch_size = parse(key, value)?,
            "rank" => self.rank = optional(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = value.into(),
            "checkpoint" => self.checkpoint = optional::<PathBuf>(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn resolve(&mut self, p: Pending) -> Result<()> {
        let (old_task, old) = match &self.data {
            DataSource::Synthetic {
                task,
                n_train,
                n_test,
                classes,
                size,
                noise,
            } => (Some(*task), (*n_train, *n_test, *classes, *size, *noise)),
            DataSource::Idx { .. } => (None, (0, 0, 0, None, None)),
        };
        match p.dataset.as_deref() {
            Some("idx") => {
                let need = |v: Option<PathBuf>, k: &str| {
                    v.ok_or_else(|| Error::Config(format!("dataset = idx requires {k}")))
                };
                self.data = DataSource::Idx {
                    train_images: need(p.train_images, "train_images")?,
                    train_labels: need(p.train_labels, "train_labels")?,
                    test_images: need(p.test_images, "test_images")?,
                    test_labels: need(p.test_labels, "test_labels")?,
                };
            }
            name => {
                let task = match name {
                    Some(n) => n.parse()?,
                    None => old_task.unwrap_or(SynthKind::Blobs),
                };
                self.data = DataSource::Synthetic {
                    task,
                    n_train: p.n_train.unwrap_or(old.0),
                    n_test: p.n_test.unwrap_or(old.1),
                    classes: p.classes.unwrap_or(old.2),
                    size: p.size.or(old.3),
                    noise: p.noise.or(old.4),
                };
            }
        }
        let arch = p.arch.as_deref().unwrap_or(match self.arch {
            Architecture::Mlp { .. } => "mlp",
            Architecture::Cnn { .. } => "cnn",
        });
        self.arch = match arch {
            "mlp" => Architecture::Mlp {
                hidden: p.hidden.unwrap_or_else(|| match &self.arch {
                    Architecture::Mlp { hidden } => hidden.clone(),
                    _ => vec![32],
                }),
            },
            "cnn" => {
                let channels = p.channels.unwrap_or_else(|| vec![16, 32]);
                let strides = p.strides.unwrap_or_else(|| {
                    (0..channels.len()).map(|i| if i == 0 { 1 } else { 2 }).collect()
                });
                Architecture::Cnn { channels, strides }
            }
            other => return Err(Error::Config(format!("arch must be mlp or cnn, got {other:?}"))),
        };
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("ratio {} must lie in (0, 1)", self.ratio)));
        }
        if let Some(c) = self.cap {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Config(format!("cap {c} must lie in (0, 1]")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config(format!("damping {} must be non-negative", self.damping)));
        }
        if self.train.batch_size == 0 || self.fisher_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Architecture::Cnn { channels, strides } = &self.arch {
            if channels.is_empty() || channels.len() != strides.len() || strides.contains(&0) {
                return Err(Error::Config("cnn needs one positive stride per conv layer".into()));
            }
        }
        Ok(())
    }

    pub fn effective_cap(&self) -> f64 {
        self.cap.unwrap_or(if self.iterations > 1 { 0.5 } else { 0.95 })
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            weight_decay: self.finetune_weight_decay,
            batch_size: self.train.batch_size,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic {
                task,
                n_train,
                n_test,
                classes,
                size,
                noise,
            } => {
                let mut spec = SynthSpec::new(*task, self.data_seed.unwrap_or(self.seed), *n_train, *classes);
                if let Some(s) = size {
                    spec.size = *s;
                }
                spec.noise = *noise;
                let train = synth_dataset(&spec, Split::Train)?;
                let test = synth_dataset(&SynthSpec { n: *n_test, ..spec }, Split::Test)?;
                Ok((train, test))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(train_images, train_labels, Split::Train)?,
                load_idx(test_images, test_labels, Split::Test)?,
            )),
        }
    }

    /// Freshly initialized network for the configured architecture.
    pub fn build_network(&self, input_shape: &[usize], classes: usize) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let n_in: usize = input_shape.iter().product();
                let mut net = Network::mlp(n_in, hidden, classes, &mut rng)?;
                if input_shape.len() > 1 {
                    net.layers.insert(0, Layer::Flatten);
                    net = Network::new(net.layers, input_shape.to_vec())?;
                }
                Ok(net)
            }
            Architecture::Cnn { channels, strides } => {
                let [c, h, w] = input_shape[..] else {
                    return Err(Error::Config(format!(
                        "cnn needs image inputs (channels, height, width), got shape {input_shape:?}"
                    )));
                };
                Network::cnn([c, h, w], channels, strides, classes, &mut rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_lists() {
        let cfg = RunConfig::parse(
            "# toy cnn\n dataset = stripes\nsize = 8\nclasses=4\narch = cnn\nchannels = 8, 16\nstrides = 1,2\n\
             strategy = kron-obs  # filter level\nratio = 0.3\niterations = 3\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.strategy, Strategy::KronObs);
        assert_eq!(cfg.ratio, 0.3);
        assert_eq!(cfg.effective_cap(), 0.5);
        assert_eq!(
            cfg.arch,
            Architecture::Cnn {
                channels: vec![8, 16],
                strides: vec![1, 2]
            }
        );
        let DataSource::Synthetic { task, size, classes, .. } = cfg.data else { panic!() };
        assert_eq!((task, size, classes), (SynthKind::Stripes, Some(8), 4));
        assert_eq!(RunConfig::parse("").unwrap().effective_cap(), 0.95);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in ["ratio = 1.5", "bogus = 1", "no equals sign", "strategy = magnitude", "arch = rnn", "dataset = idx"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn builds_datasets_and_networks() {
        let cfg = RunConfig::parse("dataset = stripes\nsize = 6\nn_train = 20\nn_test = 10\narch = mlp\nhidden = 5").unwrap();
        let (train, test) = cfg.datasets().unwrap();
        assert_eq!((train.len(), test.len()), (20, 10));
        let net = cfg.build_network(train.sample_shape(), train.num_classes).unwrap();
        assert!(matches!(net.layers[0], Layer::Flatten));
        assert_eq!(net.forward(&train.inputs).unwrap().shape(), &[20, train.num_classes]);
        let cnn = RunConfig::parse("arch = cnn").unwrap();
        assert!(matches!(cnn.build_network(&[2], 2), Err(Error::Config(_))));
    }
}
