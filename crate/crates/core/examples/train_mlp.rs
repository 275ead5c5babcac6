//! Trains an MLP on Gaussian blobs and prints the learning curve.
//!
//! cargo run --release --example train_mlp -- [epochs]

use kfeprune::nn::{evaluate, synth_dataset, train, Network, Split, SynthKind, SynthSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let spec = SynthSpec::new(SynthKind::Blobs, 0, 512, 4);
    let train_set = synth_dataset(&spec, Split::Train)?;
    let test_set = synth_dataset(&spec, Split::Test)?;
    let mut net = Network::mlp(2, &[32], 4, &mut ChaCha8Rng::seed_from_u64(0))?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    for e in train(&mut net, &train_set, &cfg)? {
        println!("epoch {:>3} lr {:<7.4} loss {:.4} acc {:.3}", e.epoch, e.lr, e.loss, e.accuracy);
    }
    let (loss, acc) = evaluate(&net, &test_set)?;
    println!("test loss {loss:.4} acc {acc:.3}");
    Ok(())
}
