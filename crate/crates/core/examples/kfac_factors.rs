//! Estimates Kronecker factors for a trained MLP and compares the exact
//! Fisher block of its hidden layer before and after rotating it into the
//! Kronecker-factored eigenbasis.
//!
//! cargo run --release --example kfac_factors

use kfeprune::kfac::{estimate, EstimateOptions};
use kfeprune::nn::{synth_dataset, train, Network, Split, SynthKind, SynthSpec, TrainConfig};
use kfeprune::oracle::{exact_fisher_block, offdiag_ratio, rotate_to_kfe, FisherFlavor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let data = synth_dataset(&SynthSpec::new(SynthKind::Moons, 0, 256, 2), Split::Train)?;
    let mut net = Network::mlp(2, &[12, 12], 2, &mut ChaCha8Rng::seed_from_u64(0))?;
    train(&mut net, &data, &TrainConfig::default())?;

    let factors = estimate(&net, &data, &EstimateOptions::default())?;
    for (l, f) in factors.iter().enumerate() {
        if let Some(f) = f {
            println!("layer {l}: A {}x{}, S {}x{}, {} samples", f.a.rows(), f.a.cols(), f.s.rows(), f.s.cols(), f.sample_count);
        }
    }
    let layer = net.weight_layers()[1];
    let block = exact_fisher_block(&net, &data, layer, FisherFlavor::Empirical)?;
    let eig = factors[layer].as_ref().expect("weight layer").eigenbasis()?;
    let rotated = rotate_to_kfe(&block, &eig)?;
    println!("off-diagonal mass, parameter basis: {:.3}", offdiag_ratio(&block));
    println!("off-diagonal mass, eigenbasis:      {:.3}", offdiag_ratio(&rotated));
    Ok(())
}
