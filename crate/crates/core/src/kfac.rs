//! Kronecker-factored Fisher estimation.
//!
//! For a layer `s = Wᵀa` with `W` of shape `n×m`, the Fisher of `vec(W)` is
//! approximated by `S ⊗ A` with `A = E[a aᵀ]` (`n×n`) and
//! `S = E[g gᵀ]` (`m×m`), `g = ∇_s ℓ` the per-sample pre-activation gradient.
//! Convolutions use patches for `a` (summed over output locations) and
//! per-location gradients for `g` (averaged over locations); the channel
//! variant replaces patches by per-pixel channel vectors averaged over
//! positions, which makes `A` only `c_in × c_in`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eig, Matrix};
use crate::nn::ops::{im2col, nchw_to_rows};
use crate::nn::{CaptureBatch, Dataset, Layer, LayerCapture, Network};
use crate::reparam::Basis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorVariant {
    Dense,
    ConvFull,
    ConvChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KronFactors {
    pub a: Matrix,
    pub s: Matrix,
    pub sample_count: usize,
    pub variant: FactorVariant,
}

/// Eigendecompositions of both factors; `Q_S ⊗ Q_A` is the layer's
/// Kronecker-factored eigenbasis.
#[derive(Debug, Clone)]
pub struct EigenFactors {
    pub qa: Matrix,
    pub lambda_a: Vec<f64>,
    pub qs: Matrix,
    pub lambda_s: Vec<f64>,
}

impl EigenFactors {
    /// Diagonal of `Λ_S ⊗ Λ_A` in column-major `vec` order: entry
    /// `j·n + i` is `λ_S(j)·λ_A(i)`.
    pub fn kron_eigenvalues(&self) -> Vec<f64> {
        self.lambda_s
            .iter()
            .flat_map(|s| self.lambda_a.iter().map(move |a| s * a))
            .collect()
    }
}

impl KronFactors {
    pub fn new(variant: FactorVariant, a_dim: usize, s_dim: usize) -> Self {
        KronFactors {
            a: Matrix::zeros(a_dim, a_dim),
            s: Matrix::zeros(s_dim, s_dim),
            sample_count: 0,
            variant,
        }
    }

    /// Zero factors sized for a weight layer.
    pub fn for_layer(layer: &Layer, conv_variant: FactorVariant) -> Result<Self> {
        match layer {
            Layer::Dense(d) => Ok(KronFactors::new(FactorVariant::Dense, d.n_in(), d.n_out())),
            Layer::Conv(c) => match conv_variant {
                FactorVariant::ConvChannel => Ok(KronFactors::new(conv_variant, c.c_in, c.c_out)),
                _ => Ok(KronFactors::new(FactorVariant::ConvFull, c.weight.rows(), c.c_out)),
            },
            Layer::Bottleneck(b) => {
                let (rows, cols) = b.core_dims();
                match b.basis {
                    Basis::Dense | Basis::ConvPatch => Ok(KronFactors::new(FactorVariant::Dense, rows, cols)),
                    Basis::ConvChannel => match conv_variant {
                        FactorVariant::ConvFull => Ok(KronFactors::new(
                            FactorVariant::ConvFull,
                            rows * b.geom.slices(),
                            cols,
                        )),
                        _ => Ok(KronFactors::new(FactorVariant::ConvChannel, rows, cols)),
                    },
                }
            }
            Layer::Relu | Layer::Flatten => Err(Error::Validation("layer has no weights".into())),
        }
    }

    fn absorb(&mut self, samples: usize, sum_a: Matrix, sum_s: Matrix) -> Result<()> {
        if sum_a.shape() != self.a.shape() || sum_s.shape() != self.s.shape() {
            return Err(Error::Dimension(format!(
                "capture gives factors {:?}/{:?}, expected {:?}/{:?}",
                sum_a.shape(),
                sum_s.shape(),
                self.a.shape(),
                self.s.shape()
            )));
        }
        if samples == 0 {
            return Ok(());
        }
        let total = (self.sample_count + samples) as f64;
        // Streaming mean: M ← M + (Σ_batch − B·M) / (count + B).
        let b = samples as f64;
        self.a = self.a.add(&sum_a.sub(&self.a.scale(b))?.scale(1.0 / total))?.symmetrized();
        self.s = self.s.add(&sum_s.sub(&self.s.scale(b))?.scale(1.0 / total))?.symmetrized();
        self.sample_count += samples;
        Ok(())
    }

    /// Accumulates `A = E[a aᵀ]`, `S = E[g gᵀ]` from a rank-2 `(batch, n)`
    /// capture. Rank-3 `(batch, locations, n)` captures of per-location
    /// vectors are summed over locations for `A` and averaged for `S`.
    pub fn accumulate_dense(&mut self, cap: &LayerCapture) -> Result<()> {
        if self.variant != FactorVariant::Dense {
            return Err(Error::Validation("accumulate_dense on non-dense factors".into()));
        }
        let batch = cap.input.batch();
        if cap.grad_out.batch() != batch {
            return Err(Error::Dimension("capture batch sizes disagree".into()));
        }
        let (x, g, locations) = match (cap.input.shape(), cap.grad_out.shape()) {
            (&[b, n], &[_, m]) => (
                Matrix::from_vec(b, n, cap.input.data().to_vec())?,
                Matrix::from_vec(b, m, cap.grad_out.data().to_vec())?,
                1,
            ),
            (&[b, l, n], &[_, l2, m]) if l == l2 => (
                Matrix::from_vec(b * l, n, cap.input.data().to_vec())?,
                Matrix::from_vec(b * l, m, cap.grad_out.data().to_vec())?,
                l,
            ),
            (a, g) => {
                return Err(Error::Dimension(format!(
                    "dense capture with shapes {a:?} and {g:?}"
                )))
            }
        };
        let sum_a = x.t_matmul(&x);
        let sum_s = g.t_matmul(&g).scale(1.0 / locations as f64);
        self.absorb(batch, sum_a, sum_s)
    }

    /// Patch-based convolution factors: `A = Σ_locations E[a_i a_iᵀ]`,
    /// `S = (1/|I|) Σ_locations E[g_i g_iᵀ]`.
    pub fn accumulate_conv(&mut self, cap: &LayerCapture) -> Result<()> {
        if self.variant != FactorVariant::ConvFull {
            return Err(Error::Validation("accumulate_conv on non-conv factors".into()));
        }
        let geom = cap
            .geom
            .ok_or_else(|| Error::Validation("conv accumulation needs a conv capture".into()))?;
        let batch = cap.input.batch();
        let (patches, ho, wo) = im2col(&cap.input, geom)?;
        let g = nchw_to_rows(&cap.grad_out)?;
        if g.rows() != patches.rows() {
            return Err(Error::Dimension("conv capture gradient/patch locations disagree".into()));
        }
        let locations = (ho * wo) as f64;
        self.absorb(batch, patches.t_matmul(&patches), g.t_matmul(&g).scale(1.0 / locations))
    }

    /// Channel-covariance variant: `A = (1/(N|T|)) Σ_x Σ_t a_t(x) a_t(x)ᵀ`
    /// over per-pixel channel vectors; `S` as in [`Self::accumulate_conv`].
    pub fn accumulate_conv_channel(&mut self, cap: &LayerCapture) -> Result<()> {
        if self.variant != FactorVariant::ConvChannel {
            return Err(Error::Validation("accumulate_conv_channel on other factors".into()));
        }
        let (batch, _, h, w) = cap.input.dims4()?;
        let (_, _, ho, wo) = cap.grad_out.dims4()?;
        let x = nchw_to_rows(&cap.input)?;
        let g = nchw_to_rows(&cap.grad_out)?;
        let sum_a = x.t_matmul(&x).scale(1.0 / (h * w) as f64);
        let sum_s = g.t_matmul(&g).scale(1.0 / (ho * wo) as f64);
        self.absorb(batch, sum_a, sum_s)
    }

    pub fn accumulate(&mut self, cap: &LayerCapture) -> Result<()> {
        match self.variant {
            FactorVariant::Dense => self.accumulate_dense(cap),
            FactorVariant::ConvFull => self.accumulate_conv(cap),
            FactorVariant::ConvChannel => self.accumulate_conv_channel(cap),
        }
    }

    /// Trace-normalized factored damping:
    /// `A + √λ·tr(A)/dim·I`, `S + √λ·tr(S)/dim·I`.
    pub fn damp(&self, lambda: f64) -> Result<KronFactors> {
        if !(lambda >= 0.0) {
            return Err(Error::Validation(format!("damping {lambda} must be non-negative")));
        }
        let mut out = self.clone();
        if lambda > 0.0 {
            let root = lambda.sqrt();
            let na = self.a.rows().max(1) as f64;
            let ns = self.s.rows().max(1) as f64;
            out.a.add_diagonal(root * self.a.trace() / na);
            out.s.add_diagonal(root * self.s.trace() / ns);
        }
        Ok(out)
    }

    pub fn eigenbasis(&self) -> Result<EigenFactors> {
        if self.sample_count == 0 {
            return Err(Error::State("eigenbasis of factors with no samples".into()));
        }
        let ea = sym_eig(&self.a)?;
        let es = sym_eig(&self.s)?;
        Ok(EigenFactors {
            qa: ea.eigenvectors,
            lambda_a: ea.eigenvalues,
            qs: es.eigenvectors,
            lambda_s: es.eigenvalues,
        })
    }

    /// Fisher-vector product `(S ⊗ A) vec(X) = vec(A X Sᵀ)`, returned as a
    /// matrix shaped like `X`.
    pub fn fisher_vec(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.a.rows() || x.cols() != self.s.rows() {
            return Err(Error::Dimension(format!(
                "fisher_vec with {}x{} argument against factors {}x{} / {}x{}",
                x.rows(),
                x.cols(),
                self.a.rows(),
                self.a.cols(),
                self.s.rows(),
                self.s.cols()
            )));
        }
        Ok(self.a.matmul(x)?.matmul_t(&self.s))
    }

    /// The explicit `S ⊗ A` (small layers only).
    pub fn kron(&self) -> Result<Matrix> {
        linalg::kron(&self.s, &self.a)
    }

    pub fn inverses(&self) -> Result<(Matrix, Matrix)> {
        Ok((linalg::spd_inverse(&self.a)?, linalg::spd_inverse(&self.s)?))
    }
}

/// Which layers to estimate and with which conv flavor.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub conv_variant: FactorVariant,
    pub batch_size: usize,
    /// Upper bound on the number of batches; `None` means a full pass.
    pub max_batches: Option<usize>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            conv_variant: FactorVariant::ConvFull,
            batch_size: 64,
            max_batches: None,
        }
    }
}

/// Accumulates one batch of captures into per-layer factors.
pub fn accumulate_batch(factors: &mut [Option<KronFactors>], capture: &CaptureBatch) -> Result<()> {
    for (f, cap) in factors.iter_mut().zip(&capture.layers) {
        if let (Some(f), Some(cap)) = (f.as_mut(), cap.as_ref()) {
            f.accumulate(cap)?;
        }
    }
    Ok(())
}

/// One pass over `data` (in order), collecting factors for every weight
/// layer using the training labels (empirical Fisher).
pub fn estimate(net: &Network, data: &Dataset, opts: &EstimateOptions) -> Result<Vec<Option<KronFactors>>> {
    if data.is_empty() {
        return Err(Error::Validation("factor estimation needs data".into()));
    }
    let mut factors: Vec<Option<KronFactors>> = net
        .layers
        .iter()
        .map(|l| {
            if l.has_weights() {
                KronFactors::for_layer(l, opts.conv_variant).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (n, chunk) in idx.chunks(opts.batch_size.max(1)).enumerate() {
        if opts.max_batches.is_some_and(|m| n >= m) {
            break;
        }
        let (x, y) = data.batch(chunk);
        let trace = net.forward_trace(&x)?;
        let pass = net.backward(&trace, &y)?;
        accumulate_batch(&mut factors, &pass.capture)?;
    }
    Ok(factors)
}
