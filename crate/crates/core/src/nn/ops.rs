//! Primitive forward/backward kernels shared by plain and bottleneck layers.
//!
//! Weight matrices follow the `n×m` convention `s = Wᵀa`: rows index inputs
//! (features, or `(channel, ky, kx)` patch entries for convolutions) and
//! columns index outputs. All backward passes take per-sample output
//! gradients and return parameter gradients *summed* over the batch.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const POINTWISE: ConvGeom = ConvGeom {
        k: 1,
        stride: 1,
        pad: 0,
    };

    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { k, stride, pad }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.k == 0 || self.stride == 0 || h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            return Err(Error::Dimension(format!(
                "kernel {} stride {} padding {} does not fit a {h}x{w} input",
                self.k, self.stride, self.pad
            )));
        }
        Ok((
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        ))
    }

    pub fn slices(&self) -> usize {
        self.k * self.k
    }
}

/// Extracts patches: one row per `(sample, oy, ox)` location, columns ordered
/// `(channel, ky, kx)`.
pub fn im2col(x: &Tensor, g: ConvGeom) -> Result<(Matrix, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = g.output_size(h, w)?;
    let k = g.k;
    let cols = c * k * k;
    let mut out = Matrix::zeros(b * ho * wo, cols);
    let data = x.data();
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = out.row_mut((n * ho + oy) * wo + ox);
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ch * k + ky) * k + kx] = data[base + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((out, ho, wo))
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &Matrix, input_shape: (usize, usize, usize, usize), g: ConvGeom) -> Result<Tensor> {
    let (b, c, h, w) = input_shape;
    let (ho, wo) = g.output_size(h, w)?;
    let k = g.k;
    if cols.shape() != (b * ho * wo, c * k * k) {
        return Err(Error::Dimension("col2im patch matrix has the wrong shape".into()));
    }
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    let data = out.data_mut();
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = cols.row((n * ho + oy) * wo + ox);
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            data[base + iy as usize * w + ix as usize] += row[(ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(B, C, H, W)` → `(B·H·W) × C`, one row per pixel.
pub fn nchw_to_rows(x: &Tensor) -> Result<Matrix> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data = x.data();
    Ok(Matrix::from_fn(b * hw, c, |row, ch| {
        let (n, p) = (row / hw, row % hw);
        data[(n * c + ch) * hw + p]
    }))
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw(m: &Matrix, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    if m.rows() != b * hw {
        return Err(Error::Dimension("pixel-row matrix has the wrong number of rows".into()));
    }
    let c = m.cols();
    let mut data = vec![0.0; b * c * hw];
    for row in 0..m.rows() {
        let (n, p) = (row / hw, row % hw);
        for (ch, &v) in m.row(row).iter().enumerate() {
            data[(n * c + ch) * hw + p] = v;
        }
    }
    Tensor::new(vec![b, c, h, w], data)
}

fn add_bias(y: &mut Matrix, bias: &[f64]) {
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

pub fn linear_forward(x: &Matrix, w: &Matrix, bias: Option<&[f64]>) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, gy: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let gx = gy.matmul_t(w);
    let gw = x.t_matmul(gy);
    let gb = column_sums(gy);
    (gx, gw, gb)
}

pub fn conv_forward(x: &Tensor, w: &Matrix, bias: Option<&[f64]>, g: ConvGeom) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    if w.rows() != c * g.slices() {
        return Err(Error::Dimension(format!(
            "conv weight has {} rows, input needs {}",
            w.rows(),
            c * g.slices()
        )));
    }
    let (patches, ho, wo) = im2col(x, g)?;
    let y = linear_forward(&patches, w, bias)?;
    rows_to_nchw(&y, b, ho, wo)
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv_backward(x: &Tensor, w: &Matrix, gy: &Tensor, g: ConvGeom) -> Result<(Tensor, Matrix, Vec<f64>)> {
    let dims = x.dims4()?;
    let (patches, _, _) = im2col(x, g)?;
    let gy_rows = nchw_to_rows(gy)?;
    let (gp, gw, gb) = linear_backward(&patches, w, &gy_rows);
    let gx = col2im(&gp, dims, g)?;
    Ok((gx, gw, gb))
}

/// Expands per-channel spatial kernels `d` (`r × k²`) to the block-diagonal
/// `(r·k²) × r` weight of an ordinary convolution.
pub fn depthwise_weight(d: &Matrix) -> Matrix {
    let (r, s) = d.shape();
    let mut w = Matrix::zeros(r * s, r);
    for ch in 0..r {
        for i in 0..s {
            w[(ch * s + i, ch)] = d[(ch, i)];
        }
    }
    w
}

/// Restricts a full conv weight gradient to the depthwise (block-diagonal)
/// entries.
pub fn depthwise_grad(gw: &Matrix, r: usize, s: usize) -> Matrix {
    Matrix::from_fn(r, s, |ch, i| gw[(ch * s + i, ch)])
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}
