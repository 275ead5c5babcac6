//! Rewrites a dense layer in its Kronecker-factored eigenbasis, checks the
//! outputs are unchanged, then drops eigen-directions and reports the error.
//!
//! cargo run --release --example eigenbasis_bottleneck

use kfeprune::kfac::{estimate, EstimateOptions};
use kfeprune::nn::{synth_dataset, train, Layer, Network, Split, SynthKind, SynthSpec, TrainConfig};
use kfeprune::prune::eigendamage_scores;
use kfeprune::reparam::{eigenprune, to_kfe, Basis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let data = synth_dataset(&SynthSpec::new(SynthKind::Blobs, 0, 256, 4), Split::Train)?;
    let mut net = Network::mlp(2, &[16, 16], 4, &mut ChaCha8Rng::seed_from_u64(0))?;
    train(&mut net, &data, &TrainConfig::default())?;
    let factors = estimate(&net, &data, &EstimateOptions::default())?;

    let l = net.weight_layers()[1];
    let eig = factors[l].as_ref().expect("weight layer").eigenbasis()?;
    let b = to_kfe(&net.layers[l], &eig, Basis::Dense)?;
    let mut kfe = net.clone();
    kfe.layers[l] = Layer::Bottleneck(b.clone());
    let gap = net.forward(&data.inputs)?.max_abs_diff(&kfe.forward(&data.inputs)?);
    println!("eigenbasis rewrite, max output change {gap:.2e}");

    let (in_scores, out_scores) = eigendamage_scores(b.core.matrix(), &eig.lambda_a, &eig.lambda_s, 1)?;
    let lowest = |scores: &[f64], k: usize| {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]));
        idx.truncate(k);
        idx.sort();
        idx
    };
    let (r, c) = b.core_dims();
    for drop in [2, 6, 10] {
        let pruned = eigenprune(&b, &lowest(&in_scores, drop), &lowest(&out_scores, drop))?;
        let mut p = net.clone();
        p.layers[l] = Layer::Bottleneck(pruned.clone());
        let (loss, acc) = p.loss_and_accuracy(&data.inputs, &data.labels)?;
        println!(
            "drop {drop} least important in/out directions: {} params (plain {}), loss {loss:.4}, acc {acc:.3}",
            pruned.param_count(),
            r * c + c
        );
    }
    Ok(())
}
