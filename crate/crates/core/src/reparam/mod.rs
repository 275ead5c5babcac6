//! Eigenbasis reparameterization: bottleneck layers `Q_A · W′ · Q_Sᵀ`,
//! pruning in the eigenbasis, basis merging, and depthwise separable
//! decomposition of the core.

mod als;
mod bottleneck;

pub use als::{absorb_depthwise, depthwise_decompose, AlsOptions, DepthwiseFactors};
pub use bottleneck::{eigenprune, merge_bases, nested_forward, to_kfe, Basis, BottleneckLayer, Core};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::kfac::{EigenFactors, KronFactors};
    use crate::linalg::{sym_eig, Matrix};
    use crate::nn::{Conv, ConvGeom, Dense, Layer, Network, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
        let m = random(n, n, rng);
        sym_eig(&m.matmul_t(&m).add(&Matrix::identity(n)).unwrap())
            .unwrap()
            .eigenvectors
    }

    fn eig_of(qa: Matrix, qs: Matrix) -> EigenFactors {
        let (na, ns) = (qa.rows(), qs.rows());
        EigenFactors {
            qa,
            lambda_a: vec![1.0; na],
            qs,
            lambda_s: vec![1.0; ns],
        }
    }

    fn tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_layer(c_in: usize, c_out: usize, geom: ConvGeom, rng: &mut impl Rng) -> Layer {
        let mut c = Conv::init(c_in, c_out, geom, rng);
        c.bias = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Layer::Conv(c)
    }

    fn forward(layer: &Layer, x: &Tensor) -> Tensor {
        layer.forward(x).unwrap().0
    }

    #[test]
    fn dense_reparameterization_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::new(random(5, 3, &mut rng), vec![0.1, -0.2, 0.3]).unwrap();
        let layer = Layer::Dense(d.clone());
        let eig = eig_of(random_orthogonal(5, &mut rng), random_orthogonal(3, &mut rng));
        let b = to_kfe(&layer, &eig, Basis::Dense).unwrap();
        let x = tensor(vec![4, 5], &mut rng);
        let y0 = forward(&layer, &x);
        let y1 = forward(&Layer::Bottleneck(b.clone()), &x);
        assert!(y0.max_abs_diff(&y1) < 1e-10);
        assert!(b.effective_weight().sub(&d.weight).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn conv_reparameterization_preserves_function_both_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for stride in [1, 2] {
            let geom = ConvGeom::new(3, stride, 1);
            let layer = conv_layer(3, 4, geom, &mut rng);
            let x = tensor(vec![2, 3, 6, 6], &mut rng);
            let y0 = forward(&layer, &x);
            let channel = eig_of(random_orthogonal(3, &mut rng), random_orthogonal(4, &mut rng));
            let b = to_kfe(&layer, &channel, Basis::ConvChannel).unwrap();
            assert!(y0.max_abs_diff(&b.forward(&x).unwrap()) < 1e-10);
            let patch = eig_of(random_orthogonal(27, &mut rng), random_orthogonal(4, &mut rng));
            let b = to_kfe(&layer, &patch, Basis::ConvPatch).unwrap();
            assert!(y0.max_abs_diff(&b.forward(&x).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn basis_must_fit_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = Layer::Dense(Dense::init(4, 2, &mut rng));
        let eig = eig_of(Matrix::identity(4), Matrix::identity(2));
        assert!(matches!(to_kfe(&layer, &eig, Basis::ConvChannel), Err(Error::Validation(_))));
        let bad = eig_of(Matrix::identity(3), Matrix::identity(2));
        assert!(matches!(to_kfe(&layer, &bad, Basis::Dense), Err(Error::Dimension(_))));
        assert!(to_kfe(&Layer::Relu, &eig, Basis::Dense).is_err());
    }

    /// Finite-difference check of every bottleneck parameter gradient
    /// through a small network.
    fn check_gradients(b: BottleneckLayer, x: Tensor, classes: usize) {
        let shape = x.sample_shape().to_vec();
        let mut layers = vec![Layer::Bottleneck(b)];
        if shape.len() == 3 {
            layers.push(Layer::Flatten);
        }
        let net = Network::new(layers.clone(), shape.clone()).unwrap();
        let feat = net.output_shape().unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        layers.push(Layer::Relu);
        layers.push(Layer::Dense(Dense::init(feat, classes, &mut rng)));
        let mut net = Network::new(layers, shape).unwrap();
        let labels: Vec<usize> = (0..x.batch()).map(|i| i % classes).collect();
        let trace = net.forward_trace(&x).unwrap();
        let pass = net.backward(&trace, &labels).unwrap();
        let analytic = pass.grads.flat();
        let theta = net.params_flat();
        let h = 1e-6;
        let n_first: usize = net.layers[0].params().iter().map(|p| p.len()).sum();
        for i in (0..n_first).step_by(3) {
            let mut p = theta.clone();
            p[i] += h;
            net.set_params_flat(&p).unwrap();
            let up = net.loss_and_accuracy(&x, &labels).unwrap().0;
            p[i] -= 2.0 * h;
            net.set_params_flat(&p).unwrap();
            let down = net.loss_and_accuracy(&x, &labels).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", analytic[i]);
        }
        net.set_params_flat(&theta).unwrap();
    }

    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dense = Layer::Dense(Dense::init(4, 3, &mut rng));
        let eig = eig_of(random_orthogonal(4, &mut rng), random_orthogonal(3, &mut rng));
        let b = eigenprune(&to_kfe(&dense, &eig, Basis::Dense).unwrap(), &[1], &[]).unwrap();
        check_gradients(b, tensor(vec![3, 4], &mut rng), 2);

        let geom = ConvGeom::new(3, 2, 1);
        let conv = conv_layer(2, 3, geom, &mut rng);
        let x = tensor(vec![2, 2, 5, 5], &mut rng);
        let ch = eig_of(random_orthogonal(2, &mut rng), random_orthogonal(3, &mut rng));
        let b = to_kfe(&conv, &ch, Basis::ConvChannel).unwrap();
        check_gradients(eigenprune(&b, &[], &[2]).unwrap(), x.clone(), 2);
        let f = depthwise_decompose(b.core.matrix(), 9, &AlsOptions::new(2)).unwrap();
        check_gradients(absorb_depthwise(&b, &f).unwrap(), x.clone(), 2);
        let pa = eig_of(random_orthogonal(18, &mut rng), random_orthogonal(3, &mut rng));
        let b = to_kfe(&conv, &pa, Basis::ConvPatch).unwrap();
        check_gradients(eigenprune(&b, &[0, 5], &[1]).unwrap(), x, 2);
    }

    #[test]
    fn eigenprune_error_is_removed_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(6, 4, &mut rng);
        let layer = Layer::Dense(Dense::new(w.clone(), vec![0.0; 4]).unwrap());
        let eig = eig_of(random_orthogonal(6, &mut rng), random_orthogonal(4, &mut rng));
        let b = to_kfe(&layer, &eig, Basis::Dense).unwrap();
        let (rows, cols) = (vec![0, 3], vec![2]);
        let p = eigenprune(&b, &rows, &cols).unwrap();
        let core = b.core.matrix();
        let mut removed = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                if rows.contains(&i) || cols.contains(&j) {
                    removed += core[(i, j)].powi(2);
                }
            }
        }
        let err = p.effective_weight().sub(&w).unwrap().frobenius().powi(2);
        assert!((err - removed).abs() < 1e-10);
        assert_eq!(p.kept_rows, vec![1, 2, 4, 5]);
        assert_eq!(p.kept_cols, vec![0, 1, 3]);
        assert_eq!(p.core_dims(), (4, 3));
    }

    #[test]
    fn eigenprune_rejects_removing_everything() {
        let b = to_kfe(
            &Layer::Dense(Dense::new(Matrix::identity(2), vec![0.0; 2]).unwrap()),
            &eig_of(Matrix::identity(2), Matrix::identity(2)),
            Basis::Dense,
        )
        .unwrap();
        assert!(matches!(eigenprune(&b, &[0, 1], &[]), Err(Error::Validation(_))));
        assert!(matches!(eigenprune(&b, &[], &[0, 1]), Err(Error::Validation(_))));
        assert!(matches!(eigenprune(&b, &[7], &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn merged_bases_match_nested_bottlenecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let geom = ConvGeom::new(3, 1, 1);
        let conv = conv_layer(4, 5, geom, &mut rng);
        let outer = eig_of(random_orthogonal(4, &mut rng), random_orthogonal(5, &mut rng));
        let outer = eigenprune(&to_kfe(&conv, &outer, Basis::ConvChannel).unwrap(), &[1], &[0]).unwrap();
        let inner_eig = eig_of(random_orthogonal(3, &mut rng), random_orthogonal(4, &mut rng));
        let inner = to_kfe(&outer.core_layer().unwrap(), &inner_eig, Basis::ConvChannel).unwrap();
        let inner = eigenprune(&inner, &[2], &[3]).unwrap();
        let merged = merge_bases(&outer, &inner.qa, &inner.qs).unwrap();
        // Pruned inner core equals the merged core's restriction.
        let x = tensor(vec![2, 4, 5, 5], &mut rng);
        let nested = nested_forward(&outer, &inner, &x).unwrap();
        let flat = merged.forward(&x).unwrap();
        assert!(nested.max_abs_diff(&flat) < 1e-10);

        let dense = Layer::Dense(Dense::init(6, 4, &mut rng));
        let outer = eig_of(random_orthogonal(6, &mut rng), random_orthogonal(4, &mut rng));
        let outer = to_kfe(&dense, &outer, Basis::Dense).unwrap();
        let inner_eig = eig_of(random_orthogonal(6, &mut rng), random_orthogonal(4, &mut rng));
        let inner = to_kfe(&outer.core_layer().unwrap(), &inner_eig, Basis::Dense).unwrap();
        let merged = merge_bases(&outer, &inner.qa, &inner.qs).unwrap();
        let x = tensor(vec![3, 6], &mut rng);
        let d = nested_forward(&outer, &inner, &x).unwrap().max_abs_diff(&merged.forward(&x).unwrap());
        assert!(d < 1e-10);
    }

    #[test]
    fn kfe_factors_of_bottleneck_core_are_diagonal_in_merged_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::mlp(5, &[4], 3, &mut rng).unwrap();
        let x = tensor(vec![16, 5], &mut rng);
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let trace = net.forward_trace(&x).unwrap();
        let pass = net.backward(&trace, &labels).unwrap();
        let cap = pass.capture.layers[0].as_ref().unwrap();
        let mut f = KronFactors::for_layer(&net.layers[0], crate::kfac::FactorVariant::ConvFull).unwrap();
        f.accumulate(cap).unwrap();
        let eig = f.eigenbasis().unwrap();
        let b = to_kfe(&net.layers[0], &eig, Basis::Dense).unwrap();
        let mut bnet = net.clone();
        bnet.layers[0] = Layer::Bottleneck(b);
        let trace = bnet.forward_trace(&x).unwrap();
        let pass = bnet.backward(&trace, &labels).unwrap();
        let cap = pass.capture.layers[0].as_ref().unwrap();
        let mut g = KronFactors::for_layer(&bnet.layers[0], crate::kfac::FactorVariant::ConvFull).unwrap();
        g.accumulate(cap).unwrap();
        assert!(g.a.max_offdiag_abs() < 1e-10);
        assert!(g.s.max_offdiag_abs() < 1e-10);
    }

    #[test]
    fn depthwise_exact_for_rank_r_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c_in, c_out, s, r) = (4, 5, 9, 3);
        let truth = DepthwiseFactors {
            u: random(c_in, r, &mut rng),
            v: random(c_out, r, &mut rng),
            c: random(s, r, &mut rng),
            objective: vec![],
            restarts: 0,
        };
        let w = truth.reconstruct();
        let f = depthwise_decompose(&w, s, &AlsOptions { max_iters: 2000, ..AlsOptions::new(r) }).unwrap();
        let rel = f.reconstruct().sub(&w).unwrap().frobenius() / w.frobenius();
        assert!(rel < 1e-6, "relative residual {rel}");
    }

    #[test]
    fn depthwise_full_rank_dense_case_is_exact() {
        // One slice: the tensor is a matrix and rank min(c_in, c_out) is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random(4, 3, &mut rng);
        let f = depthwise_decompose(&w, 1, &AlsOptions::new(3)).unwrap();
        assert!(f.reconstruct().sub(&w).unwrap().frobenius() < 1e-8);
    }

    #[test]
    fn depthwise_rejects_bad_rank() {
        let w = Matrix::identity(4);
        assert!(matches!(depthwise_decompose(&w, 1, &AlsOptions::new(0)), Err(Error::Validation(_))));
        assert!(matches!(depthwise_decompose(&w, 1, &AlsOptions::new(5)), Err(Error::Validation(_))));
        assert!(matches!(depthwise_decompose(&w, 3, &AlsOptions::new(1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn depthwise_zero_core_is_singular() {
        let w = Matrix::zeros(18, 2);
        assert!(matches!(depthwise_decompose(&w, 9, &AlsOptions::new(2)), Err(Error::Singular(_))));
    }

    #[test]
    fn absorbed_depthwise_matches_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let geom = ConvGeom::new(3, 1, 1);
        let conv = conv_layer(3, 4, geom, &mut rng);
        let eig = eig_of(random_orthogonal(3, &mut rng), random_orthogonal(4, &mut rng));
        let b = to_kfe(&conv, &eig, Basis::ConvChannel).unwrap();
        let f = depthwise_decompose(b.core.matrix(), 9, &AlsOptions::new(3)).unwrap();
        let d = absorb_depthwise(&b, &f).unwrap();
        let approx = BottleneckLayer {
            core: Core::Full(f.reconstruct()),
            ..b.clone()
        };
        let x = tensor(vec![2, 3, 4, 4], &mut rng);
        let y_d = d.forward(&x).unwrap();
        let y_a = approx.forward(&x).unwrap();
        assert!(y_d.max_abs_diff(&y_a) < 1e-10);
        assert_eq!(d.param_count(), 3 * 3 + 9 * 3 + 4 * 3 + 4);
        assert!(d.effective_weight().sub(&approx.effective_weight()).unwrap().max_abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn als_objective_never_increases(seed in 0u64..1000, r in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(4 * 9, 4, &mut rng);
            let f = depthwise_decompose(&w, 9, &AlsOptions::new(r)).unwrap();
            for pair in f.objective.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-14);
            }
        }

        #[test]
        fn eigenprune_parseval(seed in 0u64..1000, nr in 0usize..4, nc in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geom = ConvGeom::new(3, 1, 1);
            let conv = conv_layer(4, 3, geom, &mut rng);
            let Layer::Conv(c) = &conv else { unreachable!() };
            let eig = eig_of(random_orthogonal(4, &mut rng), random_orthogonal(3, &mut rng));
            let b = to_kfe(&conv, &eig, Basis::ConvChannel).unwrap();
            let rows: Vec<usize> = (0..nr).collect();
            let cols: Vec<usize> = (0..nc).collect();
            let p = eigenprune(&b, &rows, &cols).unwrap();
            let core = b.core.matrix();
            let mut removed = 0.0;
            for i in 0..core.rows() {
                for j in 0..core.cols() {
                    if rows.contains(&(i / 9)) || cols.contains(&j) {
                        removed += core[(i, j)].powi(2);
                    }
                }
            }
            let err = p.effective_weight().sub(&c.weight).unwrap().frobenius().powi(2);
            prop_assert!((err - removed).abs() < 1e-9 * (1.0 + removed));
        }
    }
}
