//! OBD and OBS on a three-weight quadratic with two strongly correlated
//! weights, checked against the exact constrained minimizer.
//!
//! cargo run --release --example obd_vs_obs

use kfeprune::linalg::{spd_inverse, Matrix};
use kfeprune::oracle::{exact_multi_prune, exact_single_prune, ExactQuadratic, MultiPrune};
use kfeprune::prune::{obd_scores, obs_scores, obs_update};

fn main() -> kfeprune::Result<()> {
    let h = Matrix::from_rows(&[vec![1.0, 0.99, 0.0], vec![0.99, 1.0, 0.01], vec![0.0, 0.01, 0.5]])?;
    let theta = vec![1.0; 3];
    let quad = ExactQuadratic::new(theta.clone(), h.clone())?;
    let h_inv = spd_inverse(&h)?;

    println!("OBD scores {:.4?}", obd_scores(&theta, &h.diag())?);
    println!("OBS scores {:.4?}", obs_scores(&theta, &h_inv)?);
    for q in 0..3 {
        let closed = obs_update(&theta, &h_inv, q)?;
        let (exact, cost) = exact_single_prune(q, &quad)?;
        println!("remove w{}: OBS Δθ {closed:.4?}, exact {exact:.4?}, ΔL {cost:.4}", q + 1);
    }
    for set in [[1, 2], [0, 1]] {
        let (_, zeroed) = exact_multi_prune(&set, &quad, MultiPrune::ZeroOnly)?;
        let (_, compensated) = exact_multi_prune(&set, &quad, MultiPrune::Compensated)?;
        println!("remove {set:?}: zeroing ΔL {zeroed:.4}, compensated ΔL {compensated:.4}");
    }
    Ok(())
}
