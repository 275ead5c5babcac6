//! Kronecker products, vec and eigendecompositions on small random matrices.
//!
//! cargo run --release --example kronecker_identities

use kfeprune::linalg::{kron, sym_eig, unvec, vec, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd(n: usize, rng: &mut impl Rng) -> kfeprune::Result<Matrix> {
    let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut s = m.matmul(&m.transpose())?;
    s.add_diagonal(0.1);
    Ok(s.symmetrized())
}

fn main() -> kfeprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, s) = (spd(3, &mut rng)?, spd(2, &mut rng)?);
    let w = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));

    // (S ⊗ A) vec(W) = vec(A W S)
    let lhs = kron(&s, &a)?.matvec(&vec(&w))?;
    let rhs = vec(&a.matmul(&w)?.matmul(&s)?);
    let gap = lhs.iter().zip(&rhs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("(S⊗A)vec(W) vs vec(AWS): {gap:.2e}");
    println!("unvec(vec(W)) == W: {}", unvec(&vec(&w), 3, 2)? == w);

    let ea = sym_eig(&a)?;
    let es = sym_eig(&s)?;
    let ek = sym_eig(&kron(&s, &a)?)?;
    let mut products: Vec<f64> = es
        .eigenvalues
        .iter()
        .flat_map(|ls| ea.eigenvalues.iter().map(move |la| ls * la))
        .collect();
    products.sort_by(f64::total_cmp);
    let mut direct = ek.eigenvalues.clone();
    direct.sort_by(f64::total_cmp);
    println!("eig(S⊗A)      {direct:.4?}");
    println!("eig(S)·eig(A) {products:.4?}");
    Ok(())
}
