use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{evaluate, Dataset, EpochStats, Network};

use super::accounting::{count_flops, count_params, layer_remaining, reduction_pct};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl SplitMetrics {
    pub fn measure(net: &Network, data: &Dataset) -> Result<Self> {
        let (loss, accuracy) = evaluate(net, data)?;
        Ok(SplitMetrics { loss, accuracy })
    }
}

/// One command's (or one round's) results. Wall time is kept out of this
/// record so that reruns produce identical JSON; see [`Timing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<usize>,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss_pre_prune: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss_post_prune: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss_post_finetune: Option<f64>,
    pub params: usize,
    pub flops: usize,
    pub baseline_params: usize,
    pub baseline_flops: usize,
    pub param_reduction_pct: f64,
    pub flop_reduction_pct: f64,
    /// Parameters of each weight layer over its baseline count.
    pub layer_remaining: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub removed_units: Option<usize>,
    /// Largest fraction of any (layer, unit kind) group removed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_removed_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge_check: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub rounds: Vec<MetricsRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub decomposition: Vec<DecompositionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub layer: usize,
    pub rank: usize,
    pub iterations: usize,
    pub objective: f64,
    pub relative_error: f64,
    pub restarts: usize,
}

impl MetricsRecord {
    /// Accuracy, loss and size of `net` against a `baseline` network.
    pub fn measure(
        command: &str,
        seed: u64,
        net: &Network,
        baseline: &Network,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<Self> {
        let shape = net.input_shape.clone();
        let params = count_params(net);
        let flops = count_flops(net, &shape)?;
        let baseline_params = count_params(baseline);
        let baseline_flops = count_flops(baseline, &baseline.input_shape)?;
        Ok(MetricsRecord {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            strategy: None,
            ratio: None,
            cap: None,
            round: None,
            train: SplitMetrics::measure(net, train)?,
            test: SplitMetrics::measure(net, test)?,
            train_loss_pre_prune: None,
            train_loss_post_prune: None,
            train_loss_post_finetune: None,
            params,
            flops,
            baseline_params,
            baseline_flops,
            param_reduction_pct: reduction_pct(baseline_params, params),
            flop_reduction_pct: reduction_pct(baseline_flops, flops),
            layer_remaining: layer_remaining(net, baseline)?,
            removed_units: None,
            max_removed_fraction: None,
            merge_check: None,
            rounds: Vec::new(),
            decomposition: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Wall-clock seconds per command, written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub schema_version: u32,
    pub command: String,
    pub wall_seconds: f64,
}

impl Timing {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("timing serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,loss,accuracy\n");
    for e in curve {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.loss, e.accuracy));
    }
    out
}

pub fn write_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    std::fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}
