//! Minimal deterministic neural-network stack: dense and convolution
//! layers, ReLU, softmax cross-entropy and SGD, with capture of the layer
//! inputs and per-sample pre-activation gradients that curvature
//! estimation needs.

pub mod data;
mod layer;
mod network;
pub mod ops;
mod tensor;
mod train;

pub use data::{load_idx, synth_dataset, Dataset, Split, SynthKind, SynthSpec};
pub use layer::{Conv, Dense, Layer, LayerCapture};
pub(crate) use layer::LayerBackward;
pub use network::{softmax, softmax_cross_entropy, BackwardPass, CaptureBatch, Gradients, Network, Trace};
pub use ops::ConvGeom;
pub use tensor::Tensor;
pub use train::{evaluate, sgd_step, train, EpochStats, TrainConfig};
