//! Train, prune, finetune, evaluate and decompose runs driven by a flat
//! config file, with parameter and FLOP accounting and JSON metrics.

pub mod accounting;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod surgery;

pub use accounting::{count_flops, count_params, layer_flops, layer_params, layer_remaining, reduction_pct};
pub use commands::{run, Command};
pub use config::{Architecture, DataSource, RunConfig};
pub use metrics::{MetricsRecord, SplitMetrics, Timing};
pub use surgery::{prunable_layers, prune_network, PruneOptions, PruneOutcome};
