use rand::Rng;

use super::layer::{Conv, Dense, Layer, LayerCache, LayerCapture};
use super::ops::ConvGeom;
use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A straight-line stack of layers ending in class logits, trained with
/// mean softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
}

/// Activations recorded by [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    caches: Vec<LayerCache>,
    pub logits: Tensor,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.logits.batch()
    }

    /// Input tensor seen by layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }
}

/// Gradients laid out like [`Layer::params`], averaged over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// Captured inputs and per-sample pre-activation gradients for every weight
/// layer of one batch.
#[derive(Debug, Clone)]
pub struct CaptureBatch {
    pub batch: usize,
    pub layers: Vec<Option<LayerCapture>>,
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
    pub capture: CaptureBatch,
}

/// Mean softmax cross-entropy. Returns the mean loss, the per-sample logit
/// gradients `softmax(z) − onehot(y)` (not divided by the batch size) and
/// the number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, usize)> {
    if labels.len() != logits.rows() {
        return Err(Error::State(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Validation(format!("label {y} out of range for {classes} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &z)| if z > row[best] { j } else { best });
        if argmax == y {
            correct += 1;
        }
        grad[(r, y)] -= 1.0;
    }
    Ok((loss / labels.len().max(1) as f64, grad, correct))
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let net = Network { layers, input_shape };
        let out = net.output_shape()?;
        if out.len() != 1 {
            return Err(Error::Dimension(format!("network must end in logits, got shape {out:?}")));
        }
        Ok(net)
    }

    /// ReLU MLP `input → hidden… → classes`.
    pub fn mlp(n_in: usize, hidden: &[usize], classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = n_in;
        for &h in hidden {
            layers.push(Layer::Dense(Dense::init(prev, h, rng)));
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense(Dense::init(prev, classes, rng)));
        Network::new(layers, vec![n_in])
    }

    /// 3×3 ReLU convolutions (padding 1) with the given channels and
    /// strides, then flatten and a dense classifier.
    pub fn cnn(
        input: [usize; 3],
        channels: &[usize],
        strides: &[usize],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels.len() != strides.len() {
            return Err(Error::Config("one stride per conv layer is required".into()));
        }
        let mut layers = Vec::new();
        let [mut c, mut h, mut w] = input;
        for (&co, &s) in channels.iter().zip(strides) {
            let geom = ConvGeom::new(3, s, 1);
            layers.push(Layer::Conv(Conv::init(c, co, geom, rng)));
            layers.push(Layer::Relu);
            (h, w) = geom.output_size(h, w)?;
            c = co;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(Dense::init(c * h * w, classes, rng)));
        Network::new(layers, input.to_vec())
    }

    /// Per-sample input shape of every layer, followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().map(|s| s[0]).unwrap_or(0)
    }

    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].has_weights()).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.input_shape,
                x.sample_shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.0;
        }
        Ok(h)
    }

    /// Forward pass that keeps every layer input for a later backward pass.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&h)?;
            inputs.push(h);
            caches.push(cache);
            h = y;
        }
        Ok(Trace {
            inputs,
            caches,
            logits: h,
        })
    }

    pub fn backward(&self, trace: &Trace, labels: &[usize]) -> Result<BackwardPass> {
        if labels.len() != trace.batch() {
            return Err(Error::State(format!(
                "trace holds {} samples but {} labels were given",
                trace.batch(),
                labels.len()
            )));
        }
        let (loss, gz, correct) = softmax_cross_entropy(&trace.logits.to_matrix(), labels)?;
        let (grads, capture) = self.backward_from(trace, &gz)?;
        Ok(BackwardPass {
            loss,
            correct,
            grads,
            capture,
        })
    }

    /// Backpropagates per-sample logit gradients `gz` (`batch × classes`).
    /// Parameter gradients are averaged over the batch; captured
    /// pre-activation gradients stay per-sample.
    pub fn backward_from(&self, trace: &Trace, gz: &Matrix) -> Result<(Gradients, CaptureBatch)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::State("trace was recorded on a different network".into()));
        }
        if gz.rows() != trace.batch() || gz.cols() != trace.logits.sample_len() {
            return Err(Error::State("logit gradient does not match the traced batch".into()));
        }
        let batch = trace.batch();
        let inv = 1.0 / batch.max(1) as f64;
        let mut g = Tensor::from_matrix(gz.clone());
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut captures = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let back = layer.backward(&trace.inputs[i], &trace.caches[i], &g)?;
            grads[i] = back
                .param_grads
                .into_iter()
                .map(|p| p.into_iter().map(|v| v * inv).collect())
                .collect();
            captures[i] = back.capture;
            g = back.grad_input;
        }
        Ok((
            Gradients { layers: grads },
            CaptureBatch {
                batch,
                layers: captures,
            },
        ))
    }

    /// Mean loss and accuracy on a batch.
    pub fn loss_and_accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.forward(x)?;
        let (loss, _, correct) = softmax_cross_entropy(&logits.to_matrix(), labels)?;
        Ok((loss, correct as f64 / labels.len().max(1) as f64))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(<[f64]>::len).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params()).flatten().copied().collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.copy_from_slice(&values[offset..offset + p.len()]);
                offset += p.len();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.params()).flatten().all(|v| v.is_finite())
    }
}
