//! Brute-force references: exact Fisher matrices, finite-difference
//! Hessians, KKT solutions of constrained quadratic pruning problems and
//! diagonal Gaussian approximations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfac::EigenFactors;
use crate::linalg::{self, cholesky_solve, kron, solve, Matrix};
use crate::nn::{Dataset, Network};

/// Largest parameter count the dense oracles accept.
pub const ORACLE_MAX_PARAMS: usize = 2000;

/// `L(θ* + Δθ) − L(θ*) ≈ ½ΔθᵀHΔθ` around a mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactQuadratic {
    pub theta: Vec<f64>,
    pub h: Matrix,
}

impl ExactQuadratic {
    pub fn new(theta: Vec<f64>, h: Matrix) -> Result<Self> {
        if h.shape() != (theta.len(), theta.len()) {
            return Err(Error::Dimension(format!(
                "Hessian {:?} does not match {} parameters",
                h.shape(),
                theta.len()
            )));
        }
        let scale = h.max_abs().max(1.0);
        if h.sub(&h.transpose())?.max_abs() > 1e-10 * scale {
            return Err(Error::Validation("Hessian is not symmetric".into()));
        }
        Ok(ExactQuadratic { theta, h })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `½ΔθᵀHΔθ`.
    pub fn cost(&self, delta: &[f64]) -> Result<f64> {
        let hd = self.h.matvec(delta)?;
        Ok(0.5 * delta.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherFlavor {
    /// Gradients at the dataset labels.
    Empirical,
    /// Every class weighted by the model's predicted probability.
    Expected,
}

/// Per-sample gradients and their weights, in `params_flat` order.
fn weighted_gradients(net: &Network, data: &Dataset, flavor: FisherFlavor) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut out = Vec::new();
    for i in 0..data.len() {
        let (x, y) = data.batch(&[i]);
        let trace = net.forward_trace(&x)?;
        match flavor {
            FisherFlavor::Empirical => out.push((1.0, net.backward(&trace, &y)?.grads.flat())),
            FisherFlavor::Expected => {
                let probs = crate::nn::softmax(&trace.logits.to_matrix());
                for c in 0..probs.cols() {
                    let p = probs[(0, c)];
                    if p > 0.0 {
                        out.push((p, net.backward(&trace, &[c])?.grads.flat()));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn outer_mean(grads: &[(f64, Vec<f64>)], index: &[usize], samples: usize) -> Matrix {
    let d = index.len();
    let mut f = Matrix::zeros(d, d);
    for (w, g) in grads {
        let v: Vec<f64> = index.iter().map(|&k| g[k]).collect();
        for i in 0..d {
            let wi = w * v[i];
            if wi == 0.0 {
                continue;
            }
            let row = f.row_mut(i);
            for j in 0..d {
                row[j] += wi * v[j];
            }
        }
    }
    f.scale(1.0 / samples as f64)
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("exact Fisher needs at least one sample".into()));
    }
    Ok(())
}

/// Exact Fisher over every network parameter, in `params_flat` order.
pub fn exact_fisher(net: &Network, data: &Dataset, flavor: FisherFlavor) -> Result<Matrix> {
    let n = net.param_count();
    if n > ORACLE_MAX_PARAMS {
        return Err(Error::Size(format!(
            "exact Fisher over {n} parameters exceeds the {ORACLE_MAX_PARAMS} limit"
        )));
    }
    check_data(data)?;
    let grads = weighted_gradients(net, data, flavor)?;
    Ok(outer_mean(&grads, &(0..n).collect::<Vec<_>>(), data.len()))
}

/// Positions in `params_flat` of layer `layer`'s weight matrix, listed in
/// column-stacked `vec(W)` order.
pub fn weight_vec_index(net: &Network, layer: usize) -> Result<Vec<usize>> {
    let (rows, cols) = match net.layers.get(layer) {
        Some(crate::nn::Layer::Dense(d)) => d.weight.shape(),
        Some(crate::nn::Layer::Conv(c)) => c.weight.shape(),
        _ => {
            return Err(Error::Validation(format!(
                "layer {layer} is not a dense or conv layer"
            )))
        }
    };
    let offset: usize = net.layers[..layer]
        .iter()
        .flat_map(|l| l.params())
        .map(|p| p.len())
        .sum();
    Ok((0..cols)
        .flat_map(|j| (0..rows).map(move |i| offset + i * cols + j))
        .collect())
}

/// Exact Fisher block of one layer's weights in `vec(W)` order, directly
/// comparable with `S ⊗ A`.
pub fn exact_fisher_block(net: &Network, data: &Dataset, layer: usize, flavor: FisherFlavor) -> Result<Matrix> {
    let index = weight_vec_index(net, layer)?;
    if index.len() > ORACLE_MAX_PARAMS {
        return Err(Error::Size(format!(
            "exact Fisher block over {} weights exceeds the {ORACLE_MAX_PARAMS} limit",
            index.len()
        )));
    }
    check_data(data)?;
    let grads = weighted_gradients(net, data, flavor)?;
    Ok(outer_mean(&grads, &index, data.len()))
}

/// Central-difference Hessian of `f` at `theta`, symmetrized.
pub fn finite_diff_hessian(f: impl Fn(&[f64]) -> f64, theta: &[f64], step: f64) -> Result<Matrix> {
    if !(step > 0.0) {
        return Err(Error::Validation(format!("finite-difference step {step} must be positive")));
    }
    let n = theta.len();
    let mut x = theta.to_vec();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("loss evaluation is not finite".into()))
        }
    };
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut corner = |si: f64, sj: f64| {
                x[i] += si * step;
                x[j] += sj * step;
                let v = eval(&x);
                x[i] = theta[i];
                x[j] = theta[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                / (4.0 * step * step);
            h.row_mut(i)[j] = v;
            h.row_mut(j)[i] = v;
        }
    }
    Ok(h)
}

/// Solves `min ½ΔθᵀHΔθ` subject to `Δθ_q = −θ_q` for every `q` in `set`
/// through the bordered KKT system.
fn kkt(quad: &ExactQuadratic, set: &[usize]) -> Result<Vec<f64>> {
    let n = quad.dim();
    let k = set.len();
    let mut m = Matrix::zeros(n + k, n + k);
    for i in 0..n {
        m.row_mut(i)[..n].copy_from_slice(quad.h.row(i));
    }
    let mut rhs = Matrix::zeros(n + k, 1);
    for (c, &q) in set.iter().enumerate() {
        m.row_mut(q)[n + c] = 1.0;
        m.row_mut(n + c)[q] = 1.0;
        rhs.row_mut(n + c)[0] = -quad.theta[q];
    }
    let sol = solve(&m, &rhs).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!("KKT system: {msg}")),
        other => other,
    })?;
    let mut delta = sol.column(0);
    delta.truncate(n);
    for &q in set {
        delta[q] = -quad.theta[q];
    }
    Ok(delta)
}

fn check_indices(quad: &ExactQuadratic, set: &[usize]) -> Result<()> {
    let mut seen = vec![false; quad.dim()];
    for &q in set {
        if q >= quad.dim() {
            return Err(Error::Validation(format!("index {q} out of range {}", quad.dim())));
        }
        if std::mem::replace(&mut seen[q], true) {
            return Err(Error::Validation(format!("index {q} listed twice")));
        }
    }
    Ok(())
}

/// Optimal single-weight removal `(Δθ, ΔL)` from the KKT system.
pub fn exact_single_prune(q: usize, quad: &ExactQuadratic) -> Result<(Vec<f64>, f64)> {
    check_indices(quad, &[q])?;
    let delta = kkt(quad, &[q])?;
    let cost = quad.cost(&delta)?;
    Ok((delta, cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiPrune {
    /// Zero the selected weights and leave the rest untouched.
    ZeroOnly,
    /// Re-optimize the remaining weights subject to the zero constraints.
    Compensated,
}

/// Removes every weight in `set` at once and reports the true quadratic
/// cost of the move.
pub fn exact_multi_prune(set: &[usize], quad: &ExactQuadratic, mode: MultiPrune) -> Result<(Vec<f64>, f64)> {
    check_indices(quad, set)?;
    let delta = match mode {
        MultiPrune::ZeroOnly => {
            let mut d = vec![0.0; quad.dim()];
            for &q in set {
                d[q] = -quad.theta[q];
            }
            d
        }
        MultiPrune::Compensated if set.len() == quad.dim() => quad.theta.iter().map(|t| -t).collect(),
        MultiPrune::Compensated => kkt(quad, set)?,
    };
    let cost = quad.cost(&delta)?;
    Ok((delta, cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `min KL(p‖q)`: matches marginal variances.
    Forward,
    /// `min KL(q‖p)`: matches diagonal precisions.
    Reverse,
}

/// Fully factorized Gaussian fitted to a correlated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagApprox {
    pub sigma: Vec<f64>,
    pub direction: KlDirection,
}

pub fn kl_diag(cov: &Matrix, direction: KlDirection) -> Result<DiagApprox> {
    if !cov.is_square() || !cov.is_finite() {
        return Err(Error::Validation("covariance must be a finite square matrix".into()));
    }
    let n = cov.rows();
    let inv = cholesky_solve(cov, &Matrix::identity(n))
        .map_err(|_| Error::Validation("covariance is not positive definite".into()))?;
    let sigma = match direction {
        KlDirection::Forward => cov.diag(),
        KlDirection::Reverse => inv.diag().iter().map(|p| 1.0 / p).collect(),
    };
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Validation("covariance is not positive definite".into()));
    }
    Ok(DiagApprox { sigma, direction })
}

/// `½ Σ_ij S_ij Δθ_iᵀ A Δθ_j` with `Δθ_i` the columns of `dw`.
pub fn kron_quadratic_blockwise(a: &Matrix, s: &Matrix, dw: &Matrix) -> Result<f64> {
    let adw = a.matmul(dw)?;
    let m = dw.cols();
    if s.shape() != (m, m) {
        return Err(Error::Dimension("S does not match the weight columns".into()));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let quad: f64 = (0..dw.rows()).map(|r| dw[(r, i)] * adw[(r, j)]).sum();
            total += s[(i, j)] * quad;
        }
    }
    Ok(0.5 * total)
}

/// `½ tr(ΔWᵀ A ΔW S)`.
pub fn kron_quadratic_trace(a: &Matrix, s: &Matrix, dw: &Matrix) -> Result<f64> {
    Ok(0.5 * dw.t_matmul(&a.matmul(dw)?).matmul(s)?.trace())
}

/// `½ vec(ΔW)ᵀ (S ⊗ A) vec(ΔW)` with the dense Kronecker product.
pub fn kron_quadratic_dense(a: &Matrix, s: &Matrix, dw: &Matrix) -> Result<f64> {
    let quad = ExactQuadratic::new(vec![0.0; dw.rows() * dw.cols()], kron(s, a)?)?;
    quad.cost(&linalg::vec(dw))
}

/// `‖offdiag(M)‖_F / ‖M‖_F`.
pub fn offdiag_ratio(m: &Matrix) -> f64 {
    let total = m.frobenius();
    if total == 0.0 {
        return 0.0;
    }
    let diag: f64 = m.diag().iter().map(|d| d * d).sum();
    ((total * total - diag).max(0.0)).sqrt() / total
}

/// `(Q_S ⊗ Q_A)ᵀ F (Q_S ⊗ Q_A)` for a Fisher block in `vec(W)` order.
pub fn rotate_to_kfe(f: &Matrix, eig: &EigenFactors) -> Result<Matrix> {
    let q = kron(&eig.qs, &eig.qa)?;
    if q.rows() != f.rows() {
        return Err(Error::Dimension(format!(
            "eigenbasis of size {} does not match a {}-dim Fisher block",
            q.rows(),
            f.rows()
        )));
    }
    Ok(q.t_matmul(&f.matmul(&q)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfac::{FactorVariant, KronFactors};
    use crate::nn::{Dense, Layer, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_h() -> Matrix {
        Matrix::from_rows(&[vec![1.0, 0.99, 0.0], vec![0.99, 1.0, 0.01], vec![0.0, 0.01, 0.5]]).unwrap()
    }

    fn example() -> ExactQuadratic {
        ExactQuadratic::new(vec![1.0; 3], example_h()).unwrap()
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
        let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut s = m.matmul_t(&m);
        s.add_diagonal(0.1);
        s
    }

    #[test]
    fn worked_example_single_prune() {
        let (d, l) = exact_single_prune(0, &example()).unwrap();
        // Δθ₂ = 0.99/(1 − 0.0002), Δθ₃ = −0.02·Δθ₂.
        let d2 = 0.99 / 0.9998;
        for (got, want) in d.iter().zip([-1.0, d2, -0.02 * d2]) {
            assert!((got - want).abs() < 1e-12, "{d:?}");
        }
        assert!((l - 0.01).abs() < 5e-3);
        let (d, _) = exact_single_prune(1, &example()).unwrap();
        for (got, want) in d.iter().zip([0.99, -1.0, 0.02]) {
            assert!((got - want).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn worked_example_two_weights() {
        let q = example();
        let (d, l) = exact_multi_prune(&[1, 2], &q, MultiPrune::ZeroOnly).unwrap();
        assert_eq!(d, vec![0.0, -1.0, -1.0]);
        assert!((l - 0.76).abs() < 5e-3);
        let (_, l) = exact_multi_prune(&[0, 1], &q, MultiPrune::ZeroOnly).unwrap();
        assert!((l - 1.99).abs() < 5e-3);
        let (_, lc) = exact_multi_prune(&[0, 1], &q, MultiPrune::Compensated).unwrap();
        assert!(lc <= l);
    }

    #[test]
    fn full_prune_costs_whole_quadratic() {
        let q = example();
        let (d, l) = exact_multi_prune(&[0, 1, 2], &q, MultiPrune::Compensated).unwrap();
        assert_eq!(d, vec![-1.0; 3]);
        let (_, direct) = exact_multi_prune(&[0, 1, 2], &q, MultiPrune::ZeroOnly).unwrap();
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 0.5 * 4.5).abs() < 1e-12);
    }

    #[test]
    fn diagonal_hessian_single_prune_is_zeroing() {
        let q = ExactQuadratic::new(vec![2.0, -1.0, 0.5], Matrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        let (d, l) = exact_single_prune(0, &q).unwrap();
        assert!((d[0] + 2.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        assert!((l - 0.5 * 4.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn kkt_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_spd(5, &mut rng);
        let theta: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = ExactQuadratic::new(theta.clone(), h.clone()).unwrap();
        let hinv = crate::linalg::spd_inverse(&h).unwrap();
        for idx in 0..5 {
            let (d, l) = exact_single_prune(idx, &q).unwrap();
            let scale = theta[idx] / hinv[(idx, idx)];
            for k in 0..5 {
                assert!((d[k] + scale * hinv[(k, idx)]).abs() < 1e-10);
            }
            assert!((l - 0.5 * theta[idx].powi(2) / hinv[(idx, idx)]).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_kkt_is_reported() {
        let h = Matrix::from_diag(&[1.0, 0.0]);
        let q = ExactQuadratic::new(vec![1.0, 1.0], h).unwrap();
        assert!(matches!(exact_single_prune(0, &q), Err(Error::Singular(_))));
        assert!(matches!(exact_single_prune(3, &q), Err(Error::Validation(_))));
        assert!(matches!(
            exact_multi_prune(&[0, 0], &q, MultiPrune::ZeroOnly),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn quadratic_rejects_mismatch() {
        assert!(matches!(
            ExactQuadratic::new(vec![1.0], Matrix::identity(2)),
            Err(Error::Dimension(_))
        ));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ExactQuadratic::new(vec![0.0; 2], asym), Err(Error::Validation(_))));
    }

    #[test]
    fn kl_diag_examples() {
        let cov = Matrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let f = kl_diag(&cov, KlDirection::Forward).unwrap();
        let r = kl_diag(&cov, KlDirection::Reverse).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0]);
        for s in r.sigma {
            assert!((s - 0.19).abs() < 1e-12);
        }
        let d = Matrix::from_diag(&[2.0, 0.5]);
        assert_eq!(kl_diag(&d, KlDirection::Forward).unwrap().sigma, vec![2.0, 0.5]);
        let rev = kl_diag(&d, KlDirection::Reverse).unwrap().sigma;
        assert!((rev[0] - 2.0).abs() < 1e-12 && (rev[1] - 0.5).abs() < 1e-12);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(kl_diag(&bad, KlDirection::Reverse), Err(Error::Validation(_))));
    }

    #[test]
    fn finite_diff_hessian_on_polynomials() {
        let m = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let quad = |x: &[f64]| 0.5 * (2.0 * x[0] * x[0] + 0.6 * x[0] * x[1] + x[1] * x[1]);
        let h = finite_diff_hessian(quad, &[0.4, -0.7], 1e-3).unwrap();
        assert!(h.sub(&m).unwrap().max_abs() < 1e-6);
        let lin = finite_diff_hessian(|x: &[f64]| 3.0 * x[0] - x[1], &[1.0, 2.0], 1e-3).unwrap();
        assert!(lin.max_abs() < 1e-6);
        assert!(finite_diff_hessian(quad, &[0.0, 0.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_hessian(|_: &[f64]| f64::NAN, &[0.0], 1e-3),
            Err(Error::Numeric(_))
        ));
    }

    fn single_dense(rng: &mut impl Rng) -> (Network, Dataset) {
        let d = Dense::init(3, 2, rng);
        let net = Network::new(vec![Layer::Dense(d)], vec![3]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        (net, Dataset::new(x, vec![1], 2).unwrap())
    }

    #[test]
    fn single_sample_fisher_is_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (net, data) = single_dense(&mut rng);
        let f = exact_fisher_block(&net, &data, 0, FisherFlavor::Empirical).unwrap();
        let (x, y) = data.batch(&[0]);
        let pass = net.backward(&net.forward_trace(&x).unwrap(), &y).unwrap();
        let mut k = KronFactors::for_layer(&net.layers[0], FactorVariant::ConvFull).unwrap();
        k.accumulate(pass.capture.layers[0].as_ref().unwrap()).unwrap();
        assert!(k.kron().unwrap().sub(&f).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn zero_gradients_give_zero_fisher() {
        let w = Matrix::zeros(2, 2);
        let net = Network::new(vec![Layer::Dense(Dense::new(w, vec![50.0, -50.0]).unwrap())], vec![2]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let data = Dataset::new(x, vec![0], 2).unwrap();
        let f = exact_fisher(&net, &data, FisherFlavor::Empirical).unwrap();
        assert!(f.max_abs() < 1e-30);
    }

    #[test]
    fn fisher_is_psd_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::mlp(3, &[4], 2, &mut rng).unwrap();
        let x = Tensor::new(vec![10, 3], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let data = Dataset::new(x, (0..10).map(|i| i % 2).collect(), 2).unwrap();
        for flavor in [FisherFlavor::Empirical, FisherFlavor::Expected] {
            let f = exact_fisher(&net, &data, flavor).unwrap();
            let e = crate::linalg::sym_eig(&f).unwrap();
            let max = e.eigenvalues[0];
            assert!(e.eigenvalues.iter().all(|&v| v >= -1e-10 * max));
        }
        let big = Network::mlp(40, &[40], 10, &mut rng).unwrap();
        assert!(matches!(exact_fisher(&big, &data, FisherFlavor::Empirical), Err(Error::Size(_))));
    }

    #[test]
    fn expected_fisher_equals_hessian_of_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::mlp(3, &[4], 3, &mut rng).unwrap();
        let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let data = Dataset::new(x.clone(), labels.clone(), 3).unwrap();
        let last = net.layers.len() - 1;
        let f = exact_fisher_block(&net, &data, last, FisherFlavor::Expected).unwrap();
        let index = weight_vec_index(&net, last).unwrap();
        let theta = net.params_flat();
        let local: Vec<f64> = index.iter().map(|&k| theta[k]).collect();
        let loss = |v: &[f64]| {
            let mut p = theta.clone();
            for (&k, &val) in index.iter().zip(v) {
                p[k] = val;
            }
            let mut n = net.clone();
            n.set_params_flat(&p).unwrap();
            n.loss_and_accuracy(&x, &labels).unwrap().0
        };
        let h = finite_diff_hessian(loss, &local, 1e-4).unwrap();
        let rel = h.sub(&f).unwrap().frobenius() / f.frobenius();
        assert!(rel < 5e-3, "relative difference {rel}");
    }

    #[test]
    fn rotate_to_kfe_diagonalizes_kronecker_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut k = KronFactors::new(FactorVariant::Dense, 3, 2);
        k.a = random_spd(3, &mut rng);
        k.s = random_spd(2, &mut rng);
        k.sample_count = 1;
        let eig = k.eigenbasis().unwrap();
        let r = rotate_to_kfe(&k.kron().unwrap(), &eig).unwrap();
        assert!(r.max_offdiag_abs() < 1e-10);
        assert!(offdiag_ratio(&r) < 1e-10);
        assert!(offdiag_ratio(&k.kron().unwrap()) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kkt_never_worse_than_zeroing(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_spd(n, &mut rng);
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let quad = ExactQuadratic::new(theta.clone(), h.clone()).unwrap();
            let q = seed as usize % n;
            let (d, l) = exact_single_prune(q, &quad).unwrap();
            prop_assert!((theta[q] + d[q]).abs() <= 1e-12);
            prop_assert!(l <= 0.5 * theta[q] * theta[q] * h[(q, q)] + 1e-10);
        }

        #[test]
        fn forward_variance_dominates_reverse(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_spd(n, &mut rng);
            let f = kl_diag(&cov, KlDirection::Forward).unwrap();
            let r = kl_diag(&cov, KlDirection::Reverse).unwrap();
            for (a, b) in f.sigma.iter().zip(&r.sigma) {
                prop_assert!(*a >= *b * (1.0 - 1e-10));
            }
        }

        #[test]
        fn kron_quadratic_forms_agree(seed in 0u64..10_000, n in 1usize..5, m in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let s = random_spd(m, &mut rng);
            let dw = Matrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let b = kron_quadratic_blockwise(&a, &s, &dw).unwrap();
            let t = kron_quadratic_trace(&a, &s, &dw).unwrap();
            let d = kron_quadratic_dense(&a, &s, &dw).unwrap();
            prop_assert!((b - t).abs() < 1e-10 * (1.0 + b.abs()));
            prop_assert!((b - d).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }
}
