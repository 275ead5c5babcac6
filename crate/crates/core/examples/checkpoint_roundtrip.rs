//! Saves a pruned network with its curvature factors and loads it back.
//!
//! cargo run --release --example checkpoint_roundtrip

use kfeprune::checkpoint::{load, save, Checkpoint};
use kfeprune::kfac::{estimate, EstimateOptions};
use kfeprune::nn::{synth_dataset, Network, Split, SynthKind, SynthSpec};
use kfeprune::pipeline::{count_params, prune_network, PruneOptions};
use kfeprune::prune::Strategy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let spec = SynthSpec {
        size: 6,
        ..SynthSpec::new(SynthKind::Stripes, 0, 128, 4)
    };
    let data = synth_dataset(&spec, Split::Train)?;
    let net = Network::cnn([1, 6, 6], &[4, 8], &[1, 2], 4, &mut ChaCha8Rng::seed_from_u64(0))?;
    let pruned = prune_network(&net, &data, &PruneOptions::new(Strategy::EigenDamage, 0.5, 0.95))?.network;
    let factors = estimate(&pruned, &data, &EstimateOptions::default())?
        .into_iter()
        .enumerate()
        .filter_map(|(l, f)| f.map(|f| (l, f)))
        .collect();
    let ckpt = Checkpoint {
        network: pruned,
        factors,
    };
    let path = std::env::temp_dir().join("kfeprune_example.kfep");
    save(&path, &ckpt)?;
    let back = load(&path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("{} bytes, {} params, {} factor pairs", bytes, count_params(&back.network), back.factors.len());
    let same = back.network.forward(&data.inputs)?.max_abs_diff(&ckpt.network.forward(&data.inputs)?);
    println!("forward difference after reload: {same:e}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
