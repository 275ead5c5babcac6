use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::kfac::{self, EstimateOptions, FactorVariant};
use crate::nn::{self, Dataset, EpochStats, Layer, Network};
use crate::prune::{PruneMask, Strategy};
use crate::reparam::{absorb_depthwise, depthwise_decompose, AlsOptions, Basis, Core};

use super::config::RunConfig;
use super::metrics::{write_curve, DecompositionRecord, MetricsRecord, Timing};
use super::surgery::{prune_network, PruneOptions, PruneOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.kfep";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Estimate,
    Prune,
    Iterate,
    Finetune,
    Eval,
    Decompose,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Estimate => "estimate",
            Command::Prune => "prune",
            Command::Iterate => "iterate",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Decompose => "decompose",
        }
    }
}

/// Runs one command, writing its outputs and `timing.json` into the
/// configured output directory.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<MetricsRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let start = Instant::now();
    let metrics = match cmd {
        Command::Train => cmd_train(cfg),
        Command::Estimate => cmd_estimate(cfg),
        Command::Prune => cmd_prune(cfg),
        Command::Iterate => cmd_iterate(cfg),
        Command::Finetune => cmd_finetune(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Decompose => cmd_decompose(cfg),
    }?;
    Timing {
        schema_version: super::metrics::SCHEMA_VERSION,
        command: cmd.as_str().into(),
        wall_seconds: start.elapsed().as_secs_f64(),
    }
    .write(&cfg.out.join(TIMING_FILE))?;
    Ok(metrics)
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn input_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs an input checkpoint (--checkpoint PATH)".into()))?;
    checkpoint::load(path)
}

fn load_data(cfg: &RunConfig, net: Option<&Network>) -> Result<(Dataset, Dataset)> {
    let (train, test) = cfg.datasets()?;
    if let Some(net) = net {
        if net.input_shape != train.sample_shape() || net.num_classes() != train.num_classes {
            return Err(Error::Config(format!(
                "checkpoint expects samples {:?} with {} classes, dataset has {:?} with {}",
                net.input_shape,
                net.num_classes(),
                train.sample_shape(),
                train.num_classes
            )));
        }
    }
    Ok((train, test))
}

fn save_network(path: &Path, net: &Network) -> Result<()> {
    checkpoint::save(
        path,
        &Checkpoint {
            network: net.clone(),
            factors: Vec::new(),
        },
    )
}

fn fit(net: &mut Network, data: &Dataset, cfg: &nn::TrainConfig) -> Result<Vec<EpochStats>> {
    let curve = nn::train(net, data, cfg)?;
    if !net.is_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok(curve)
}

pub fn prune_options(cfg: &RunConfig) -> PruneOptions {
    PruneOptions {
        strategy: cfg.strategy,
        ratio: cfg.ratio,
        cap: cfg.effective_cap(),
        damping: cfg.damping,
        conv_basis: cfg.conv_basis,
        fisher_batch_size: cfg.fisher_batch_size,
        fisher_batches: cfg.fisher_batches,
    }
}

fn max_removed_fraction(mask: &PruneMask) -> f64 {
    mask.group_sizes
        .iter()
        .map(|(&(l, k), &n)| mask.removed(l, k).len() as f64 / n.max(1) as f64)
        .fold(0.0, f64::max)
}

fn annotate_prune(m: &mut MetricsRecord, cfg: &RunConfig, outcome: &PruneOutcome, pre_loss: f64) {
    m.strategy = Some(cfg.strategy.as_str().into());
    m.ratio = Some(cfg.ratio);
    m.cap = Some(cfg.effective_cap());
    m.train_loss_pre_prune = Some(pre_loss);
    m.removed_units = Some(outcome.mask.removed_count());
    m.max_removed_fraction = Some(max_removed_fraction(&outcome.mask));
    m.merge_check = outcome.merge_check;
}

pub fn cmd_train(cfg: &RunConfig) -> Result<MetricsRecord> {
    let (train, test) = load_data(cfg, None)?;
    let mut net = cfg.build_network(train.sample_shape(), train.num_classes)?;
    let curve = fit(&mut net, &train, &cfg.train_config())?;
    save_network(&out_path(cfg, CHECKPOINT_FILE), &net)?;
    write_curve(&out_path(cfg, CURVE_FILE), &curve)?;
    let m = MetricsRecord::measure("train", cfg.seed, &net, &net, &train, &test)?;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

/// Stores curvature factors for every weight layer in the checkpoint.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let (train, test) = load_data(cfg, Some(&ckpt.network))?;
    let variant = match (cfg.strategy, cfg.conv_basis) {
        (Strategy::EigenDamage, Basis::ConvChannel) => FactorVariant::ConvChannel,
        _ => FactorVariant::ConvFull,
    };
    let opts = EstimateOptions {
        conv_variant: variant,
        batch_size: cfg.fisher_batch_size,
        max_batches: cfg.fisher_batches,
    };
    let factors = kfac::estimate(&ckpt.network, &train, &opts)?
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| f.map(|f| (i, f)))
        .collect();
    let out = Checkpoint {
        network: ckpt.network.clone(),
        factors,
    };
    checkpoint::save(&out_path(cfg, CHECKPOINT_FILE), &out)?;
    let m = MetricsRecord::measure("estimate", cfg.seed, &ckpt.network, &ckpt.network, &train, &test)?;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

pub fn cmd_prune(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let net = ckpt.network;
    let (train, test) = load_data(cfg, Some(&net))?;
    let pre_loss = nn::evaluate(&net, &train)?.0;
    let outcome = prune_network(&net, &train, &prune_options(cfg))?;
    let mut m = MetricsRecord::measure("prune", cfg.seed, &outcome.network, &net, &train, &test)?;
    annotate_prune(&mut m, cfg, &outcome, pre_loss);
    m.train_loss_post_prune = Some(m.train.loss);
    save_network(&out_path(cfg, CHECKPOINT_FILE), &outcome.network)?;
    outcome.table.write_csv(&out_path(cfg, IMPORTANCE_FILE))?;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let (train, test) = load_data(cfg, Some(&ckpt.network))?;
    let mut net = ckpt.network.clone();
    let curve = fit(&mut net, &train, &cfg.finetune_config(cfg.seed))?;
    let out = Checkpoint {
        network: net.clone(),
        factors: if cfg.finetune_epochs == 0 { ckpt.factors } else { Vec::new() },
    };
    checkpoint::save(&out_path(cfg, CHECKPOINT_FILE), &out)?;
    write_curve(&out_path(cfg, CURVE_FILE), &curve)?;
    let mut m = MetricsRecord::measure("finetune", cfg.seed, &net, &ckpt.network, &train, &test)?;
    m.train_loss_post_finetune = Some(m.train.loss);
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

/// Rounds of estimate, score, prune (merging into existing bottlenecks)
/// and finetune. A failing round leaves the previous round's network in
/// the output checkpoint.
pub fn cmd_iterate(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let baseline = ckpt.network;
    let (train, test) = load_data(cfg, Some(&baseline))?;
    let opts = prune_options(cfg);
    let mut net = baseline.clone();
    let mut rounds: Vec<MetricsRecord> = Vec::new();
    let mut curve: Vec<EpochStats> = Vec::new();
    let ckpt_path = out_path(cfg, CHECKPOINT_FILE);
    save_network(&ckpt_path, &net)?;
    for round in 0..cfg.iterations {
        let result = (|| -> Result<(Network, MetricsRecord, Vec<EpochStats>)> {
            let pre_loss = nn::evaluate(&net, &train)?.0;
            let outcome = prune_network(&net, &train, &opts)?;
            let post_loss = nn::evaluate(&outcome.network, &train)?.0;
            outcome
                .table
                .write_csv(&out_path(cfg, &format!("importance_round{}.csv", round + 1)))?;
            outcome.table.write_csv(&out_path(cfg, IMPORTANCE_FILE))?;
            let mut pruned = outcome.network.clone();
            let round_curve = fit(&mut pruned, &train, &cfg.finetune_config(cfg.seed + round as u64))?;
            let mut m = MetricsRecord::measure("iterate", cfg.seed, &pruned, &baseline, &train, &test)?;
            annotate_prune(&mut m, cfg, &outcome, pre_loss);
            m.round = Some(round + 1);
            m.train_loss_post_prune = Some(post_loss);
            m.train_loss_post_finetune = Some(m.train.loss);
            Ok((pruned, m, round_curve))
        })();
        match result {
            Ok((pruned, m, round_curve)) => {
                let offset = curve.len();
                curve.extend(round_curve.into_iter().map(|e| EpochStats {
                    epoch: e.epoch + offset,
                    ..e
                }));
                net = pruned;
                rounds.push(m);
                save_network(&ckpt_path, &net)?;
            }
            Err(e) => {
                write_curve(&out_path(cfg, CURVE_FILE), &curve)?;
                let mut partial = MetricsRecord::measure("iterate", cfg.seed, &net, &baseline, &train, &test)?;
                partial.rounds = rounds;
                partial.write(&out_path(cfg, METRICS_FILE))?;
                return Err(match e {
                    Error::Validation(msg) | Error::State(msg) => {
                        Error::State(format!("round {} aborted, previous round kept: {msg}", round + 1))
                    }
                    other => other,
                });
            }
        }
    }
    write_curve(&out_path(cfg, CURVE_FILE), &curve)?;
    let mut m = rounds.last().cloned().expect("at least one round");
    m.round = None;
    m.rounds = rounds;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let (train, test) = load_data(cfg, Some(&ckpt.network))?;
    let m = MetricsRecord::measure("eval", cfg.seed, &ckpt.network, &ckpt.network, &train, &test)?;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

/// Replaces the core of every full-core dense or channel-basis bottleneck
/// with a depthwise separable factorization.
pub fn cmd_decompose(cfg: &RunConfig) -> Result<MetricsRecord> {
    let ckpt = input_checkpoint(cfg)?;
    let (train, test) = load_data(cfg, Some(&ckpt.network))?;
    let mut net = ckpt.network.clone();
    let mut records = Vec::new();
    for l in 0..net.layers.len() {
        let Layer::Bottleneck(b) = &net.layers[l] else { continue };
        let Core::Full(core) = &b.core else { continue };
        if b.basis == Basis::ConvPatch {
            continue;
        }
        let (r, c) = b.core_dims();
        let rank = cfg.rank.unwrap_or(r.min(c)).min(r.min(c));
        let opts = AlsOptions {
            seed: cfg.seed,
            ..AlsOptions::new(rank)
        };
        let f = depthwise_decompose(core, b.geom.slices(), &opts)?;
        let err = f.reconstruct().sub(core)?.frobenius() / core.frobenius().max(f64::MIN_POSITIVE);
        records.push(DecompositionRecord {
            layer: l,
            rank,
            iterations: f.objective.len(),
            objective: f.final_objective(),
            relative_error: err,
            restarts: f.restarts,
        });
        net.layers[l] = Layer::Bottleneck(absorb_depthwise(b, &f)?);
    }
    if records.is_empty() {
        return Err(Error::Validation(
            "checkpoint has no full-core dense or channel bottlenecks to decompose".into(),
        ));
    }
    save_network(&out_path(cfg, CHECKPOINT_FILE), &net)?;
    let mut m = MetricsRecord::measure("decompose", cfg.seed, &net, &ckpt.network, &train, &test)?;
    m.decomposition = records;
    m.write(&out_path(cfg, METRICS_FILE))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, extra: &str) -> RunConfig {
        let mut cfg = RunConfig::parse(&format!(
            "dataset = blobs\nn_train = 64\nn_test = 32\nclasses = 3\nhidden = 8\nepochs = 3\nfinetune_epochs = 1\n{extra}"
        ))
        .unwrap();
        cfg.out = dir.to_path_buf();
        cfg
    }

    #[test]
    fn train_prune_finetune_eval_chain() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(
            dir.path(),
            "dataset = stripes\nsize = 6\nclasses = 4\narch = cnn\nchannels = 4, 6\nstrategy = eigendamage\nratio = 0.4",
        );
        run(Command::Train, &cfg).unwrap();
        let stage = |name: &str| dir.path().join(name);
        std::fs::create_dir_all(stage("p")).unwrap();
        cfg.checkpoint = Some(stage(CHECKPOINT_FILE));
        cfg.out = stage("p");
        let pruned = run(Command::Prune, &cfg).unwrap();
        assert!(pruned.param_reduction_pct > 0.0);
        cfg.checkpoint = Some(stage("p").join(CHECKPOINT_FILE));
        cfg.out = stage("e");
        let eval = run(Command::Eval, &cfg).unwrap();
        assert_eq!(Some(eval.train.loss), pruned.train_loss_post_prune);
        cfg.out = stage("f");
        let tuned = run(Command::Finetune, &cfg).unwrap();
        assert!(tuned.train_loss_post_finetune.is_some());
        for f in [METRICS_FILE, CURVE_FILE, CHECKPOINT_FILE, TIMING_FILE] {
            assert!(stage("f").join(f).exists(), "{f}");
        }
        assert!(stage("p").join(IMPORTANCE_FILE).exists());
    }

    #[test]
    fn missing_checkpoint_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), "");
        assert_eq!(run(Command::Prune, &cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn decompose_needs_bottlenecks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), "");
        run(Command::Train, &cfg).unwrap();
        cfg.checkpoint = Some(dir.path().join(CHECKPOINT_FILE));
        assert!(matches!(run(Command::Decompose, &cfg), Err(Error::Validation(_))));
    }
}
