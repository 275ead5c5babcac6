//! Fits depthwise factorizations of a random 3x3 conv core with ALS at
//! increasing rank and prints the objective trace.
//!
//! cargo run --release --example depthwise_als

use kfeprune::linalg::Matrix;
use kfeprune::reparam::{depthwise_decompose, AlsOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kfeprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (c_in, c_out, k2) = (6, 8, 9);
    let w = Matrix::from_fn(c_in * k2, c_out, |_, _| rng.gen_range(-1.0..1.0));
    let energy = w.frobenius().powi(2);
    for rank in [1, 2, 4, 6] {
        let f = depthwise_decompose(&w, k2, &AlsOptions::new(rank))?;
        let rel = f.reconstruct().sub(&w)?.frobenius().powi(2) / energy;
        println!(
            "rank {rank}: {} sweeps, objective {:.4} → {:.4}, relative error {rel:.4}, {} params vs {}",
            f.objective.len(),
            f.objective.first().copied().unwrap_or(0.0),
            f.final_objective(),
            f.param_count(),
            w.rows() * w.cols()
        );
    }
    Ok(())
}
