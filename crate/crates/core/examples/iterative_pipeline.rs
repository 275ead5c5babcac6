//! Runs train and three rounds of EigenDamage prune + finetune through the
//! pipeline, writing artifacts under a temporary directory.
//!
//! cargo run --release --example iterative_pipeline

use std::path::Path;

use kfeprune::pipeline::{run, Command, RunConfig};

fn main() -> kfeprune::Result<()> {
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/toy_cnn.cfg");
    let mut cfg = RunConfig::load(&cfg_path)?;
    let root = std::env::temp_dir().join("kfeprune_iterate");
    cfg.out = root.join("train");
    let trained = run(Command::Train, &cfg)?;
    println!("trained: test acc {:.3}, {} params", trained.test.accuracy, trained.params);

    cfg.checkpoint = Some(root.join("train/checkpoint.kfep"));
    cfg.out = root.join("iterate");
    cfg.iterations = 3;
    let m = run(Command::Iterate, &cfg)?;
    for r in &m.rounds {
        println!(
            "round {}: test acc {:.3}, params -{:.1}%, flops -{:.1}%, merge check {:?}",
            r.round.unwrap_or(0),
            r.test.accuracy,
            r.param_reduction_pct,
            r.flop_reduction_pct,
            r.merge_check
        );
    }
    println!("artifacts in {}", root.display());
    Ok(())
}
