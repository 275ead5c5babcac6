use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfac::EigenFactors;
use crate::linalg::Matrix;
use crate::nn::ops::{self, col2im, im2col, nchw_to_rows, rows_to_nchw, ConvGeom};
use crate::nn::{Conv, Dense, Layer, LayerCapture, Tensor};

/// How the eigenbases act on the layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Dense layer: `Q_A` acts on the input features.
    Dense,
    /// Convolution with `Q_A` over whole `c_in·k²` patches.
    ConvPatch,
    /// Convolution with `Q_A` over channels only (a 1×1 convolution).
    ConvChannel,
}

/// Weights between the two eigenbases.
#[derive(Debug, Clone, PartialEq)]
pub enum Core {
    /// `W′`. For [`Basis::ConvChannel`] rows are `(channel, ky, kx)` of the
    /// rotated input channels, like an ordinary conv weight.
    Full(Matrix),
    /// Per-channel spatial kernels `D` (`r × k²`) after depthwise separable
    /// decomposition; for dense layers `k² = 1` and this is a diagonal.
    Depthwise(Matrix),
}

impl Core {
    pub fn matrix(&self) -> &Matrix {
        match self {
            Core::Full(m) | Core::Depthwise(m) => m,
        }
    }
}

/// A dense or conv layer expressed as `W = Q_A W′ Q_Sᵀ`: project the input
/// onto the retained input eigenvectors, apply the core, expand with the
/// retained output eigenvectors. Outer dimensions always match the layer
/// it replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckLayer {
    pub qa: Matrix,
    pub core: Core,
    pub qs: Matrix,
    pub bias: Vec<f64>,
    pub basis: Basis,
    /// Geometry of the core convolution; pointwise for dense layers.
    pub geom: ConvGeom,
    /// Indices of the eigenvectors kept since the last rotation.
    pub kept_rows: Vec<usize>,
    pub kept_cols: Vec<usize>,
}

/// `out[(a, i), b] = Σ_a' q[a', a] · w[(a', i), b]` for row blocks of
/// `slices` rows: rotates the channel index of a conv weight.
pub(crate) fn rotate_channels(w: &Matrix, q: &Matrix, slices: usize) -> Matrix {
    let (c_old, c_new) = q.shape();
    assert_eq!(w.rows(), c_old * slices);
    let cols = w.cols();
    let mut out = Matrix::zeros(c_new * slices, cols);
    for a_old in 0..c_old {
        for a in 0..c_new {
            let coef = q[(a_old, a)];
            if coef == 0.0 {
                continue;
            }
            for i in 0..slices {
                let src = w.row(a_old * slices + i).to_vec();
                let dst = out.row_mut(a * slices + i);
                for (d, s) in dst.iter_mut().zip(&src) {
                    *d += coef * s;
                }
            }
        }
    }
    out
}

fn add_bias_rows(y: &mut Matrix, bias: &[f64]) {
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

fn diag_scale(z: &Matrix, d: &[f64]) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] * d[j])
}

impl BottleneckLayer {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.core_dims();
        let core = self.core.matrix();
        let s = self.geom.slices();
        let ok = match (&self.core, self.basis) {
            (Core::Full(_), Basis::ConvChannel) => core.shape() == (r * s, c),
            (Core::Full(_), _) => core.shape() == (r, c),
            (Core::Depthwise(_), Basis::ConvPatch) => false,
            (Core::Depthwise(_), _) => core.cols() == s,
        };
        if !ok || self.qa.cols() != r || self.qs.cols() != c || self.bias.len() != self.qs.rows() {
            return Err(Error::Dimension(format!(
                "inconsistent bottleneck: Q_A {:?}, core {:?}, Q_S {:?}, bias {}",
                self.qa.shape(),
                core.shape(),
                self.qs.shape(),
                self.bias.len()
            )));
        }
        if self.basis == Basis::ConvPatch && self.qa.rows() % s != 0 {
            return Err(Error::Dimension("patch basis rows are not a multiple of k²".into()));
        }
        Ok(())
    }

    /// `(r, c)`: rows and columns of the core in eigenvector units.
    pub fn core_dims(&self) -> (usize, usize) {
        match &self.core {
            Core::Full(m) => match self.basis {
                Basis::ConvChannel => (m.rows() / self.geom.slices(), m.cols()),
                _ => m.shape(),
            },
            Core::Depthwise(d) => (d.rows(), d.rows()),
        }
    }

    pub fn n_out(&self) -> usize {
        self.qs.rows()
    }

    /// Channels (or features) the layer consumes.
    pub fn n_in(&self) -> usize {
        match self.basis {
            Basis::ConvPatch => self.qa.rows() / self.geom.slices(),
            _ => self.qa.rows(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self.basis, input) {
            (Basis::Dense, [n]) if *n == self.qa.rows() => Ok(vec![self.n_out()]),
            (Basis::ConvChannel | Basis::ConvPatch, &[c, h, w]) if c == self.n_in() => {
                let (ho, wo) = self.geom.output_size(h, w)?;
                Ok(vec![self.n_out(), ho, wo])
            }
            _ => Err(Error::Dimension(format!(
                "bottleneck ({:?}, {} inputs) cannot take shape {input:?}",
                self.basis,
                self.n_in()
            ))),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![
            self.qa.as_slice(),
            self.core.matrix().as_slice(),
            self.qs.as_slice(),
            &self.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let core = match &mut self.core {
            Core::Full(m) | Core::Depthwise(m) => m.as_mut_slice(),
        };
        vec![self.qa.as_mut_slice(), core, self.qs.as_mut_slice(), &mut self.bias]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Core as a conv weight (`(r·k²) × c`) for the channel basis.
    fn core_conv_weight(&self) -> Matrix {
        match &self.core {
            Core::Full(m) => m.clone(),
            Core::Depthwise(d) => ops::depthwise_weight(d),
        }
    }

    fn apply_core_rows(&self, z1: &Matrix) -> Matrix {
        match &self.core {
            Core::Full(m) => z1.matmul_unchecked(m),
            Core::Depthwise(d) => diag_scale(z1, &d.column(0)),
        }
    }

    /// Forward pass returning the output and the core's input and output.
    pub(crate) fn forward_parts(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.output_shape(x.sample_shape())?;
        match self.basis {
            Basis::Dense => {
                let z1 = x.to_matrix().matmul(&self.qa)?;
                let z2 = self.apply_core_rows(&z1);
                let mut y = z2.matmul_t(&self.qs);
                add_bias_rows(&mut y, &self.bias);
                Ok((Tensor::from_matrix(y), Tensor::from_matrix(z1), Tensor::from_matrix(z2)))
            }
            Basis::ConvChannel => {
                let (b, _, h, w) = x.dims4()?;
                let z1 = rows_to_nchw(&nchw_to_rows(x)?.matmul(&self.qa)?, b, h, w)?;
                let z2 = ops::conv_forward(&z1, &self.core_conv_weight(), None, self.geom)?;
                let (_, _, ho, wo) = z2.dims4()?;
                let mut y = nchw_to_rows(&z2)?.matmul_t(&self.qs);
                add_bias_rows(&mut y, &self.bias);
                Ok((rows_to_nchw(&y, b, ho, wo)?, z1, z2))
            }
            Basis::ConvPatch => {
                let b = x.batch();
                let (patches, ho, wo) = im2col(x, self.geom)?;
                let z1 = patches.matmul(&self.qa)?;
                let z2 = self.apply_core_rows(&z1);
                let mut y = z2.matmul_t(&self.qs);
                add_bias_rows(&mut y, &self.bias);
                let l = ho * wo;
                let (r, c) = (z1.cols(), z2.cols());
                Ok((
                    rows_to_nchw(&y, b, ho, wo)?,
                    Tensor::new(vec![b, l, r], z1.into_vec())?,
                    Tensor::new(vec![b, l, c], z2.into_vec())?,
                ))
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(x)?.0)
    }

    pub(crate) fn backward_parts(
        &self,
        x: &Tensor,
        z1: &Tensor,
        z2: &Tensor,
        gy: &Tensor,
    ) -> Result<crate::nn::LayerBackward> {
        use crate::nn::LayerBackward;
        match self.basis {
            Basis::Dense | Basis::ConvPatch => {
                let (xm, gyr) = if self.basis == Basis::Dense {
                    (x.to_matrix(), gy.to_matrix())
                } else {
                    (im2col(x, self.geom)?.0, nchw_to_rows(gy)?)
                };
                let rows = xm.rows();
                let z1m = Matrix::from_vec(rows, z1.data().len() / rows, z1.data().to_vec())?;
                let z2m = Matrix::from_vec(rows, z2.data().len() / rows, z2.data().to_vec())?;
                let g_qs = gyr.t_matmul(&z2m);
                let gb = column_sums(&gyr);
                let gz2 = gyr.matmul(&self.qs)?;
                let (gz1, g_core) = match &self.core {
                    Core::Full(m) => (gz2.matmul_t(m), z1m.t_matmul(&gz2)),
                    Core::Depthwise(d) => {
                        let dv = d.column(0);
                        let g = Matrix::from_fn(dv.len(), 1, |j, _| {
                            (0..rows).map(|i| z1m[(i, j)] * gz2[(i, j)]).sum()
                        });
                        (diag_scale(&gz2, &dv), g)
                    }
                };
                let gxm = gz1.matmul_t(&self.qa);
                let g_qa = xm.t_matmul(&gz1);
                let grad_input = if self.basis == Basis::Dense {
                    Tensor::from_matrix(gxm)
                } else {
                    col2im(&gxm, x.dims4()?, self.geom)?
                };
                let grad_out = Tensor::new(z2.shape().to_vec(), gz2.into_vec())?;
                Ok(LayerBackward {
                    grad_input,
                    param_grads: vec![g_qa.into_vec(), g_core.into_vec(), g_qs.into_vec(), gb],
                    capture: Some(LayerCapture {
                        input: z1.clone(),
                        grad_out,
                        geom: None,
                    }),
                })
            }
            Basis::ConvChannel => {
                let (b, _, h, w) = x.dims4()?;
                let (_, _, ho, wo) = z2.dims4()?;
                let gy_rows = nchw_to_rows(gy)?;
                let g_qs = gy_rows.t_matmul(&nchw_to_rows(z2)?);
                let gb = column_sums(&gy_rows);
                let gz2 = rows_to_nchw(&gy_rows.matmul(&self.qs)?, b, ho, wo)?;
                let core_w = self.core_conv_weight();
                let (gz1, gw, _) = ops::conv_backward(z1, &core_w, &gz2, self.geom)?;
                let g_core = match &self.core {
                    Core::Full(_) => gw,
                    Core::Depthwise(d) => ops::depthwise_grad(&gw, d.rows(), d.cols()),
                };
                let gz1_rows = nchw_to_rows(&gz1)?;
                let gx = rows_to_nchw(&gz1_rows.matmul_t(&self.qa), b, h, w)?;
                let g_qa = nchw_to_rows(x)?.t_matmul(&gz1_rows);
                Ok(LayerBackward {
                    grad_input: gx,
                    param_grads: vec![g_qa.into_vec(), g_core.into_vec(), g_qs.into_vec(), gb],
                    capture: Some(LayerCapture {
                        input: z1.clone(),
                        grad_out: gz2,
                        geom: Some(self.geom),
                    }),
                })
            }
        }
    }

    /// The layer's effective weight `Q_A W′ Q_Sᵀ` in the `n×m` view of the
    /// layer it replaced.
    pub fn effective_weight(&self) -> Matrix {
        match self.basis {
            Basis::ConvChannel => {
                let inner = self.core_conv_weight().matmul_t(&self.qs);
                rotate_channels(&inner, &self.qa.transpose(), self.geom.slices())
            }
            _ => {
                let core = match &self.core {
                    Core::Full(m) => m.clone(),
                    Core::Depthwise(d) => Matrix::from_diag(&d.column(0)),
                };
                self.qa.matmul_unchecked(&core).matmul_t(&self.qs)
            }
        }
    }

    /// The core as a stand-alone bias-free layer acting on the projected
    /// input, for re-estimating curvature around `W′`.
    pub fn core_layer(&self) -> Result<Layer> {
        let (r, c) = self.core_dims();
        let Core::Full(core) = &self.core else {
            return Err(Error::Validation("depthwise cores cannot be re-pruned".into()));
        };
        match self.basis {
            Basis::ConvChannel => Ok(Layer::Conv(Conv::new(core.clone(), vec![0.0; c], r, self.geom)?)),
            _ => Ok(Layer::Dense(Dense::new(core.clone(), vec![0.0; c])?)),
        }
    }
}

/// Rewrites a dense or conv layer in its Kronecker-factored eigenbasis:
/// `W′ = Q_Aᵀ W Q_S`. The layer computes the same function afterwards.
pub fn to_kfe(layer: &Layer, eig: &EigenFactors, basis: Basis) -> Result<BottleneckLayer> {
    let (weight, bias, geom) = match layer {
        Layer::Dense(d) => (&d.weight, &d.bias, ConvGeom::POINTWISE),
        Layer::Conv(c) => (&c.weight, &c.bias, c.geom),
        _ => return Err(Error::Validation(format!("cannot reparameterize a {} layer", layer.name()))),
    };
    let basis_ok = matches!(
        (layer, basis),
        (Layer::Dense(_), Basis::Dense) | (Layer::Conv(_), Basis::ConvChannel | Basis::ConvPatch)
    );
    if !basis_ok {
        return Err(Error::Validation(format!("{basis:?} basis does not fit a {} layer", layer.name())));
    }
    let slices = geom.slices();
    let expect_a = match basis {
        Basis::ConvChannel => weight.rows() / slices,
        _ => weight.rows(),
    };
    if eig.qa.shape() != (expect_a, expect_a) || eig.qs.shape() != (weight.cols(), weight.cols()) {
        return Err(Error::Dimension(format!(
            "eigenbases {:?}/{:?} do not fit a {}x{} weight",
            eig.qa.shape(),
            eig.qs.shape(),
            weight.rows(),
            weight.cols()
        )));
    }
    let wq = weight.matmul(&eig.qs)?;
    let core = match basis {
        Basis::ConvChannel => rotate_channels(&wq, &eig.qa, slices),
        _ => eig.qa.t_matmul(&wq),
    };
    let (r, c) = (eig.qa.cols(), eig.qs.cols());
    Ok(BottleneckLayer {
        qa: eig.qa.clone(),
        core: Core::Full(core),
        qs: eig.qs.clone(),
        bias: bias.clone(),
        basis,
        geom,
        kept_rows: (0..r).collect(),
        kept_cols: (0..c).collect(),
    })
}

fn complement(n: usize, removed: &[usize], what: &str) -> Result<Vec<usize>> {
    let mut flags = vec![true; n];
    for &i in removed {
        if i >= n {
            return Err(Error::Validation(format!("{what} index {i} out of range {n}")));
        }
        flags[i] = false;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
    if keep.is_empty() {
        return Err(Error::Validation(format!("eigenpruning would remove every {what}")));
    }
    Ok(keep)
}

/// Removes rows of `W′` with the matching columns of `Q_A`, and columns of
/// `W′` with the matching columns of `Q_S`.
pub fn eigenprune(b: &BottleneckLayer, remove_rows: &[usize], remove_cols: &[usize]) -> Result<BottleneckLayer> {
    let Core::Full(core) = &b.core else {
        return Err(Error::Validation("cannot eigenprune a depthwise core".into()));
    };
    let (r, c) = b.core_dims();
    let keep_rows = complement(r, remove_rows, "row")?;
    let keep_cols = complement(c, remove_cols, "column")?;
    let core_rows: Vec<usize> = match b.basis {
        Basis::ConvChannel => {
            let s = b.geom.slices();
            keep_rows.iter().flat_map(|&a| (0..s).map(move |i| a * s + i)).collect()
        }
        _ => keep_rows.clone(),
    };
    Ok(BottleneckLayer {
        qa: b.qa.select_columns(&keep_rows),
        core: Core::Full(core.select_rows(&core_rows).select_columns(&keep_cols)),
        qs: b.qs.select_columns(&keep_cols),
        bias: b.bias.clone(),
        basis: b.basis,
        geom: b.geom,
        kept_rows: keep_rows.iter().map(|&i| b.kept_rows[i]).collect(),
        kept_cols: keep_cols.iter().map(|&i| b.kept_cols[i]).collect(),
    })
}

/// Folds a second rotation of the core into the outer bases:
/// `Q_A ← Q_A Q′_A`, `Q_S ← Q_S Q′_S`, `W′ ← Q′_Aᵀ W′ Q′_S`.
pub fn merge_bases(outer: &BottleneckLayer, inner_qa: &Matrix, inner_qs: &Matrix) -> Result<BottleneckLayer> {
    let Core::Full(core) = &outer.core else {
        return Err(Error::Validation("cannot merge bases into a depthwise core".into()));
    };
    let (r, c) = outer.core_dims();
    if inner_qa.rows() != r || inner_qs.rows() != c {
        return Err(Error::Dimension(format!(
            "inner bases {:?}/{:?} do not fit a {r}x{c} core",
            inner_qa.shape(),
            inner_qs.shape()
        )));
    }
    let wq = core.matmul(inner_qs)?;
    let new_core = match outer.basis {
        Basis::ConvChannel => rotate_channels(&wq, inner_qa, outer.geom.slices()),
        _ => inner_qa.t_matmul(&wq),
    };
    Ok(BottleneckLayer {
        qa: outer.qa.matmul(inner_qa)?,
        core: Core::Full(new_core),
        qs: outer.qs.matmul(inner_qs)?,
        bias: outer.bias.clone(),
        basis: outer.basis,
        geom: outer.geom,
        kept_rows: (0..inner_qa.cols()).collect(),
        kept_cols: (0..inner_qs.cols()).collect(),
    })
}

/// Forward pass through `outer`'s projections with `inner` (a bottleneck
/// built on `outer`'s core) in place of the core: the two-bottleneck form
/// that [`merge_bases`] collapses.
pub fn nested_forward(outer: &BottleneckLayer, inner: &BottleneckLayer, x: &Tensor) -> Result<Tensor> {
    if inner.bias.iter().any(|&v| v != 0.0) {
        return Err(Error::Validation("inner bottleneck must be bias-free".into()));
    }
    match outer.basis {
        Basis::Dense => {
            let z1 = Tensor::from_matrix(x.to_matrix().matmul(&outer.qa)?);
            let z2 = inner.forward(&z1)?.to_matrix();
            let mut y = z2.matmul_t(&outer.qs);
            add_bias_rows(&mut y, &outer.bias);
            Ok(Tensor::from_matrix(y))
        }
        Basis::ConvChannel => {
            let (b, _, h, w) = x.dims4()?;
            let z1 = rows_to_nchw(&nchw_to_rows(x)?.matmul(&outer.qa)?, b, h, w)?;
            let z2 = inner.forward(&z1)?;
            let (_, _, ho, wo) = z2.dims4()?;
            let mut y = nchw_to_rows(&z2)?.matmul_t(&outer.qs);
            add_bias_rows(&mut y, &outer.bias);
            rows_to_nchw(&y, b, ho, wo)
        }
        Basis::ConvPatch => Err(Error::Validation(
            "nested evaluation is only defined for dense and channel bases".into(),
        )),
    }
}
