//! Trains a small CNN on striped images, then prunes half of its units
//! with every filter-level criterion and with EigenDamage, reporting the
//! training loss right after pruning (no finetuning).
//!
//! cargo run --release --example compare_strategies -- [seed] [--patch]

use kfeprune::nn::{evaluate, synth_dataset, train, Network, Split, SynthKind, SynthSpec, TrainConfig};
use kfeprune::pipeline::{count_params, prune_network, PruneOptions};
use kfeprune::prune::Strategy;
use kfeprune::reparam::Basis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec::new(SynthKind::Stripes, seed, 512, 4);
    let data = synth_dataset(&spec, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::cnn([1, 8, 8], &[16, 32], &[1, 2], 4, &mut rng)?;
    let cfg = TrainConfig {
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };
    train(&mut net, &data, &cfg)?;
    let (loss, acc) = evaluate(&net, &data)?;
    println!("trained: loss {loss:.4} acc {acc:.3} params {}", count_params(&net));

    let strategies = [
        Strategy::COBd,
        Strategy::COBs,
        Strategy::KronObd,
        Strategy::KronObs,
        Strategy::EigenDamage,
    ];
    let patch = std::env::args().any(|a| a == "--patch");
    for s in strategies {
        let mut opts = PruneOptions::new(s, 0.5, 0.95);
        if patch {
            opts.conv_basis = Basis::ConvPatch;
        }
        let out = prune_network(&net, &data, &opts)?;
        let (loss, acc) = evaluate(&out.network, &data)?;
        println!(
            "{:>12}: loss {loss:.4} acc {acc:.3} params {} removed {}",
            s.as_str(),
            count_params(&out.network),
            out.mask.removed_count()
        );
    }
    Ok(())
}
