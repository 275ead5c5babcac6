use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::reparam::{Basis, BottleneckLayer, Core};

fn live_weights(layer: &Layer) -> usize {
    match (layer, layer.mask()) {
        (_, Some(mask)) => mask.iter().filter(|&&k| k).count(),
        (Layer::Dense(d), None) => d.weight.as_slice().len(),
        (Layer::Conv(c), None) => c.weight.as_slice().len(),
        _ => 0,
    }
}

/// Stored parameters of one layer: unmasked weights plus biases, and for
/// bottlenecks both eigenbases, the core and the bias.
pub fn layer_params(layer: &Layer) -> usize {
    match layer {
        Layer::Dense(d) => live_weights(layer) + d.bias.len(),
        Layer::Conv(c) => live_weights(layer) + c.bias.len(),
        Layer::Bottleneck(b) => b.param_count(),
        Layer::Relu | Layer::Flatten => 0,
    }
}

pub fn count_params(net: &Network) -> usize {
    net.layers.iter().map(layer_params).sum()
}

fn bottleneck_flops(b: &BottleneckLayer, input: &[usize], output: &[usize]) -> usize {
    let (r, c) = b.core_dims();
    let depthwise = matches!(b.core, Core::Depthwise(_));
    let m = b.n_out();
    match (b.basis, input, output) {
        (Basis::ConvChannel, &[c_in, h, w], &[_, ho, wo]) => {
            let s = b.geom.slices();
            let core = if depthwise { s * r } else { s * r * c };
            2 * c_in * r * h * w + 2 * core * ho * wo + 2 * c * m * ho * wo
        }
        (Basis::ConvPatch, _, &[_, ho, wo]) => 2 * (b.qa.rows() * r + r * c + c * m) * ho * wo,
        _ => {
            let core = if depthwise { r } else { r * c };
            2 * (b.qa.rows() * r + core + c * m)
        }
    }
}

/// Multiply-add FLOPs (2 per MAC) of one layer for a per-sample input
/// shape. Element-wise layers and biases are free.
pub fn layer_flops(layer: &Layer, input: &[usize]) -> Result<usize> {
    let output = layer.output_shape(input)?;
    Ok(match layer {
        Layer::Dense(_) => 2 * live_weights(layer),
        Layer::Conv(_) => match output[..] {
            [_, ho, wo] => 2 * live_weights(layer) * ho * wo,
            _ => return Err(Error::Dimension(format!("conv output shape {output:?}"))),
        },
        Layer::Bottleneck(b) => bottleneck_flops(b, input, &output),
        Layer::Relu | Layer::Flatten => 0,
    })
}

pub fn count_flops(net: &Network, input_shape: &[usize]) -> Result<usize> {
    let mut shape = input_shape.to_vec();
    let mut total = 0;
    for layer in &net.layers {
        total += layer_flops(layer, &shape)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok(total)
}

/// `100·(1 − after/before)`, clamped to `[0, 100]`.
pub fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        return 0.0;
    }
    (100.0 * (1.0 - after as f64 / before as f64)).clamp(0.0, 100.0)
}

/// Parameters of each weight layer relative to `baseline`, which must have
/// the same layer layout.
pub fn layer_remaining(net: &Network, baseline: &Network) -> Result<Vec<f64>> {
    if net.layers.len() != baseline.layers.len() {
        return Err(Error::State(format!(
            "network has {} layers, baseline {}",
            net.layers.len(),
            baseline.layers.len()
        )));
    }
    Ok(net
        .weight_layers()
        .into_iter()
        .map(|i| {
            let base = layer_params(&baseline.layers[i]);
            if base == 0 {
                0.0
            } else {
                layer_params(&net.layers[i]) as f64 / base as f64
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{encode, layer_payload_len, Checkpoint};
    use crate::kfac::KronFactors;
    use crate::linalg::Matrix;
    use crate::nn::{Conv, ConvGeom, Dense};
    use crate::reparam::{eigenprune, to_kfe};
    use crate::kfac::EigenFactors;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dense = Layer::Dense(Dense::init(10, 5, &mut rng));
        assert_eq!(layer_params(&dense), 55);
        assert_eq!(layer_flops(&dense, &[10]).unwrap(), 100);
        let conv = Layer::Conv(Conv::init(2, 4, ConvGeom::new(3, 1, 1), &mut rng));
        assert_eq!(layer_flops(&conv, &[2, 8, 8]).unwrap(), 9216);
        assert!(matches!(layer_flops(&conv, &[3, 8, 8]), Err(Error::Dimension(_))));
        assert_eq!(reduction_pct(200, 50), 75.0);
        assert_eq!(reduction_pct(10, 20), 0.0);
    }

    fn identity_eig(n: usize, m: usize) -> EigenFactors {
        EigenFactors {
            qa: Matrix::identity(n),
            lambda_a: vec![1.0; n],
            qs: Matrix::identity(m),
            lambda_s: vec![1.0; m],
        }
    }

    #[test]
    fn params_match_checkpoint_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut masked = Dense::init(8, 6, &mut rng);
        masked.mask = Some((0..48).map(|_| rng.gen_bool(0.6)).collect());
        let conv = Conv::init(3, 6, ConvGeom::new(3, 1, 1), &mut rng);
        let b = to_kfe(&Layer::Conv(conv), &identity_eig(3, 6), Basis::ConvChannel).unwrap();
        let b = eigenprune(&b, &[1], &[0, 2, 5]).unwrap();
        let d = to_kfe(&Layer::Dense(Dense::init(6 * 4 * 4, 8, &mut rng)), &identity_eig(96, 8), Basis::Dense).unwrap();
        let d = eigenprune(&d, &(0..48).collect::<Vec<_>>(), &[3]).unwrap();
        let net = Network::new(
            vec![
                Layer::Bottleneck(b),
                Layer::Relu,
                Layer::Flatten,
                Layer::Bottleneck(d),
                Layer::Relu,
                Layer::Dense(masked),
            ],
            vec![3, 4, 4],
        )
        .unwrap();
        let ckpt = Checkpoint {
            network: net.clone(),
            factors: vec![(0, KronFactors::new(crate::kfac::FactorVariant::Dense, 2, 2))],
        };
        assert_eq!(layer_payload_len(&encode(&ckpt)).unwrap(), count_params(&net));
        let channel = &net.layers[0];
        let Layer::Bottleneck(b) = channel else { unreachable!() };
        assert_eq!(layer_params(channel), 3 * 2 + 2 * 9 * 3 + 6 * 3 + 6);
        assert_eq!(
            layer_flops(channel, &[3, 4, 4]).unwrap(),
            2 * 3 * 2 * 16 + 2 * 9 * 2 * 3 * 16 + 2 * 3 * 6 * 16
        );
        assert_eq!(b.core_dims(), (2, 3));
        assert_eq!(layer_remaining(&net, &net).unwrap(), vec![1.0; 3]);
    }
}
