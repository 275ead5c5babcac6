use rand::Rng;

use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reparam::BottleneckLayer;

/// Fully connected layer computing `s = Wᵀa + b` with `W` of shape `n×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Keep-flags over `weight` (row-major) for weight-level pruning.
    pub mask: Option<Vec<bool>>,
}

/// 2-D convolution. `weight` is the `(c_in·k²) × c_out` matrix view whose
/// column `i` is filter `i` flattened in `(channel, ky, kx)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeom,
    pub mask: Option<Vec<bool>>,
}

/// Kaiming-uniform bound for a given fan-in.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Dimension(format!(
                "dense bias has {} entries for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Dense {
            weight,
            bias,
            mask: None,
        })
    }

    pub fn init(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = kaiming_bound(n_in);
        let weight = Matrix::from_fn(n_in, n_out, |_, _| rng.gen_range(-bound..bound));
        Dense {
            weight,
            bias: vec![0.0; n_out],
            mask: None,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.cols()
    }
}

impl Conv {
    pub fn new(weight: Matrix, bias: Vec<f64>, c_in: usize, geom: ConvGeom) -> Result<Self> {
        if weight.rows() != c_in * geom.slices() || bias.len() != weight.cols() {
            return Err(Error::Dimension(format!(
                "conv weight {}x{} inconsistent with c_in {c_in}, k {}, bias {}",
                weight.rows(),
                weight.cols(),
                geom.k,
                bias.len()
            )));
        }
        Ok(Conv {
            c_out: weight.cols(),
            weight,
            bias,
            c_in,
            geom,
            mask: None,
        })
    }

    pub fn init(c_in: usize, c_out: usize, geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let fan_in = c_in * geom.slices();
        let bound = kaiming_bound(fan_in);
        let weight = Matrix::from_fn(fan_in, c_out, |_, _| rng.gen_range(-bound..bound));
        Conv {
            weight,
            bias: vec![0.0; c_out],
            c_in,
            c_out,
            geom,
            mask: None,
        }
    }

    /// Kernel as a `c_out × c_in × k × k` tensor in row-major order.
    pub fn kernel(&self) -> Vec<f64> {
        let s = self.geom.slices();
        let mut out = Vec::with_capacity(self.weight.rows() * self.c_out);
        for o in 0..self.c_out {
            for ci in 0..self.c_in {
                for i in 0..s {
                    out.push(self.weight[(ci * s + i, o)]);
                }
            }
        }
        out
    }

    pub fn from_kernel(kernel: &[f64], bias: Vec<f64>, c_in: usize, geom: ConvGeom) -> Result<Self> {
        let s = geom.slices();
        let c_out = bias.len();
        if kernel.len() != c_out * c_in * s {
            return Err(Error::Dimension("kernel length does not match its shape".into()));
        }
        let weight = Matrix::from_fn(c_in * s, c_out, |row, o| kernel[o * c_in * s + row]);
        Conv::new(weight, bias, c_in, geom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv),
    Relu,
    Flatten,
    Bottleneck(BottleneckLayer),
}

/// Per-sample tensors a weight layer saw during one forward/backward pass:
/// its input activations and the gradient of each sample's own loss with
/// respect to its pre-activation output. For bottleneck layers these are
/// the tensors around the core `W′`.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// Rank 2 `(batch, n)`, rank 3 `(batch, locations, n)` or rank 4 NCHW.
    pub input: Tensor,
    pub grad_out: Tensor,
    /// Present when `input`/`grad_out` are feature maps of a convolution.
    pub geom: Option<ConvGeom>,
}

/// Intermediate values a layer needs for its backward pass.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    None,
    Bottleneck { z1: Tensor, z2: Tensor },
}

pub(crate) struct LayerBackward {
    pub grad_input: Tensor,
    pub param_grads: Vec<Vec<f64>>,
    pub capture: Option<LayerCapture>,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Bottleneck(_) => "bottleneck",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv(_) | Layer::Bottleneck(_))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => match input {
                [n] if *n == d.n_in() => Ok(vec![d.n_out()]),
                _ => Err(Error::Dimension(format!(
                    "dense layer expects [{}], got {input:?}",
                    d.n_in()
                ))),
            },
            Layer::Conv(c) => match input {
                &[ch, h, w] if ch == c.c_in => {
                    let (ho, wo) = c.geom.output_size(h, w)?;
                    Ok(vec![c.c_out, ho, wo])
                }
                _ => Err(Error::Dimension(format!(
                    "conv layer expects {} input channels, got {input:?}",
                    c.c_in
                ))),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Bottleneck(b) => b.output_shape(input),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => vec![d.weight.as_slice(), &d.bias],
            Layer::Conv(c) => vec![c.weight.as_slice(), &c.bias],
            Layer::Relu | Layer::Flatten => Vec::new(),
            Layer::Bottleneck(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense(d) => vec![d.weight.as_mut_slice(), &mut d.bias],
            Layer::Conv(c) => vec![c.weight.as_mut_slice(), &mut c.bias],
            Layer::Relu | Layer::Flatten => Vec::new(),
            Layer::Bottleneck(b) => b.params_mut(),
        }
    }

    pub fn mask(&self) -> Option<&[bool]> {
        match self {
            Layer::Dense(d) => d.mask.as_deref(),
            Layer::Conv(c) => c.mask.as_deref(),
            _ => None,
        }
    }

    /// Zeroes masked-out weights.
    pub fn apply_mask(&mut self) {
        let (w, mask) = match self {
            Layer::Dense(d) => (&mut d.weight, &d.mask),
            Layer::Conv(c) => (&mut c.weight, &c.mask),
            _ => return,
        };
        if let Some(mask) = mask {
            for (v, &keep) in w.as_mut_slice().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        let y = match self {
            Layer::Dense(d) => {
                let m = x.to_matrix();
                if m.cols() != d.n_in() {
                    return Err(Error::Dimension(format!(
                        "dense layer expects {} features, got {}",
                        d.n_in(),
                        m.cols()
                    )));
                }
                Tensor::from_matrix(ops::linear_forward(&m, &d.weight, Some(&d.bias))?)
            }
            Layer::Conv(c) => ops::conv_forward(x, &c.weight, Some(&c.bias), c.geom)?,
            Layer::Relu => ops::relu_forward(x),
            Layer::Flatten => {
                let b = x.batch();
                let n = x.sample_len();
                x.clone().reshape(vec![b, n])?
            }
            Layer::Bottleneck(b) => {
                let (y, z1, z2) = b.forward_parts(x)?;
                return Ok((y, LayerCache::Bottleneck { z1, z2 }));
            }
        };
        Ok((y, LayerCache::None))
    }

    /// `gy` holds per-sample gradients; parameter gradients are batch sums.
    pub(crate) fn backward(&self, x: &Tensor, cache: &LayerCache, gy: &Tensor) -> Result<LayerBackward> {
        match self {
            Layer::Dense(d) => {
                let xm = x.to_matrix();
                let gym = gy.to_matrix();
                let (gx, mut gw, gb) = ops::linear_backward(&xm, &d.weight, &gym);
                mask_grad(&mut gw, d.mask.as_deref());
                Ok(LayerBackward {
                    grad_input: Tensor::from_matrix(gx),
                    param_grads: vec![gw.into_vec(), gb],
                    capture: Some(LayerCapture {
                        input: Tensor::from_matrix(xm),
                        grad_out: gy.clone(),
                        geom: None,
                    }),
                })
            }
            Layer::Conv(c) => {
                let (gx, mut gw, gb) = ops::conv_backward(x, &c.weight, gy, c.geom)?;
                mask_grad(&mut gw, c.mask.as_deref());
                Ok(LayerBackward {
                    grad_input: gx,
                    param_grads: vec![gw.into_vec(), gb],
                    capture: Some(LayerCapture {
                        input: x.clone(),
                        grad_out: gy.clone(),
                        geom: Some(c.geom),
                    }),
                })
            }
            Layer::Relu => Ok(LayerBackward {
                grad_input: ops::relu_backward(x, gy),
                param_grads: Vec::new(),
                capture: None,
            }),
            Layer::Flatten => Ok(LayerBackward {
                grad_input: gy.clone().reshape(x.shape().to_vec())?,
                param_grads: Vec::new(),
                capture: None,
            }),
            Layer::Bottleneck(b) => {
                let LayerCache::Bottleneck { z1, z2 } = cache else {
                    return Err(Error::State("bottleneck backward without its forward cache".into()));
                };
                b.backward_parts(x, z1, z2, gy)
            }
        }
    }
}

fn mask_grad(g: &mut Matrix, mask: Option<&[bool]>) {
    if let Some(mask) = mask {
        for (v, &keep) in g.as_mut_slice().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}
