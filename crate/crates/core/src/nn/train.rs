use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::network::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.1,
            weight_decay: 2e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step schedule: the base rate divided by 10 from epoch `⌈E/2⌉` and by
    /// 100 from epoch `⌈3E/4⌉` (zero-based epochs).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = self.epochs;
        let mut lr = self.lr;
        if epoch >= e.div_ceil(2) {
            lr *= 0.1;
        }
        if epoch >= (3 * e).div_ceil(4) {
            lr *= 0.1;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// `θ ← θ − lr·(g + weight_decay·θ)`, then masked weights are re-zeroed.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Validation(format!(
            "learning rate {lr} and weight decay {weight_decay} must be non-negative"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Dimension("gradient layout does not match the network".into()));
    }
    for (layer, lg) in net.layers.iter_mut().zip(&grads.layers) {
        let params = layer.params_mut();
        if params.len() != lg.len() {
            return Err(Error::Dimension("gradient layout does not match the layer".into()));
        }
        for (p, g) in params.into_iter().zip(lg) {
            for (theta, &gv) in p.iter_mut().zip(g) {
                *theta -= lr * (gv + weight_decay * *theta);
            }
        }
        layer.apply_mask();
    }
    Ok(())
}

/// Minibatch SGD with a seeded shuffle per epoch; returns per-epoch mean
/// training loss and accuracy.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let trace = net.forward_trace(&x)?;
            let pass = net.backward(&trace, &y)?;
            if !pass.loss.is_finite() {
                return Err(Error::Divergence(format!("loss became {} in epoch {epoch}", pass.loss)));
            }
            loss_sum += pass.loss * chunk.len() as f64;
            correct += pass.correct;
            sgd_step(net, &pass.grads, lr, cfg.weight_decay)?;
        }
        curve.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(curve)
}

/// Mean loss and accuracy over a dataset, evaluated in fixed-size chunks.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut acc = 0.0;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let (l, a) = net.loss_and_accuracy(&x, &y)?;
        loss += l * chunk.len() as f64;
        acc += a * chunk.len() as f64;
    }
    Ok((loss / data.len() as f64, acc / data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{Dense, Layer, Tensor};

    #[test]
    fn schedule_decays_at_half_and_three_quarters() {
        let cfg = TrainConfig {
            epochs: 8,
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(3), 0.1);
        assert!((cfg.lr_at(4) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(6) - 0.001).abs() < 1e-15);
        let odd = TrainConfig { epochs: 5, ..cfg };
        assert!((odd.lr_at(3) - 0.01).abs() < 1e-15);
        assert_eq!(odd.lr_at(2), 0.1);
    }

    fn scalar_net(theta: f64) -> Network {
        let d = Dense::new(Matrix::from_vec(1, 1, vec![theta]).unwrap(), vec![0.0]).unwrap();
        Network::new(vec![Layer::Dense(d)], vec![1]).unwrap()
    }

    fn grads_of(g: f64) -> Gradients {
        Gradients {
            layers: vec![vec![vec![g], vec![0.0]]],
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = scalar_net(2.0);
        sgd_step(&mut net, &grads_of(5.0), 0.0, 0.1).unwrap();
        assert_eq!(net.params_flat(), vec![2.0, 0.0]);
        sgd_step(&mut net, &grads_of(2.0), 1.0, 0.0).unwrap();
        assert_eq!(net.params_flat(), vec![0.0, 0.0]);
        assert!(matches!(
            sgd_step(&mut net, &grads_of(f64::NAN), 0.1, 0.0),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(θ) = ½·3·(θ − 1.5)², minimizer 1.5.
        let mut net = scalar_net(-4.0);
        for _ in 0..1000 {
            let theta = net.params_flat()[0];
            sgd_step(&mut net, &grads_of(3.0 * (theta - 1.5)), 0.1, 0.0).unwrap();
        }
        assert!((net.params_flat()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn xor_is_learned() {
        use rand::SeedableRng;
        let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let data = Dataset::new(x, vec![0, 1, 1, 0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::mlp(2, &[8], 2, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            lr: 0.2,
            weight_decay: 0.0,
            batch_size: 4,
            seed: 1,
        };
        let curve = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(evaluate(&net, &data).unwrap().1, 1.0);
        assert_eq!(curve.len(), 400);
    }
}
