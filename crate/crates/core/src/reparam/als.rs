use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bottleneck::{Basis, BottleneckLayer, Core};
use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, lstsq, svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsOptions {
    pub rank: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl AlsOptions {
    pub fn new(rank: usize) -> Self {
        AlsOptions {
            rank,
            max_iters: 200,
            tol: 1e-8,
            seed: 0,
            restarts: 3,
        }
    }
}

/// Rank-`r` approximation `T(a,b,i) ≈ Σ_ρ U(a,ρ)·V(b,ρ)·C(i,ρ)` of a
/// rotated conv core, so that `W′_i ≈ U diag(C(i,·)) Vᵀ` per spatial slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseFactors {
    /// `c_in × r`
    pub u: Matrix,
    /// `c_out × r`
    pub v: Matrix,
    /// `k² × r`
    pub c: Matrix,
    /// `½‖T − T̂‖²` after initialization and after every sweep.
    pub objective: Vec<f64>,
    pub restarts: usize,
}

impl DepthwiseFactors {
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn param_count(&self) -> usize {
        self.u.rows() * self.rank() + self.c.rows() * self.rank() + self.rank() * self.v.rows()
    }

    /// Slice `i` of the reconstruction, `U diag(C(i,·)) Vᵀ`.
    pub fn slice(&self, i: usize) -> Matrix {
        let ci = self.c.row(i).to_vec();
        let uc = Matrix::from_fn(self.u.rows(), self.rank(), |a, r| self.u[(a, r)] * ci[r]);
        uc.matmul_t(&self.v)
    }

    /// Reconstruction in the conv-weight layout (`(a, i)` rows, `b` columns).
    pub fn reconstruct(&self) -> Matrix {
        let s = self.c.rows();
        let mut out = Matrix::zeros(self.u.rows() * s, self.v.rows());
        for i in 0..s {
            let sl = self.slice(i);
            for a in 0..self.u.rows() {
                out.row_mut(a * s + i).copy_from_slice(sl.row(a));
            }
        }
        out
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap_or(&f64::NAN)
    }
}

/// Mode unfoldings of `T(a,b,i) = w[a·s + i, b]`, with column indices
/// `b + c_out·i`, `a + c_in·i` and `a + c_in·b`.
struct Unfoldings {
    t1: Matrix,
    t2: Matrix,
    t3: Matrix,
}

fn unfold(w: &Matrix, slices: usize) -> Unfoldings {
    let (c_in, c_out, s) = (w.rows() / slices, w.cols(), slices);
    let t = |a: usize, b: usize, i: usize| w[(a * s + i, b)];
    Unfoldings {
        t1: Matrix::from_fn(c_in, c_out * s, |a, col| t(a, col % c_out, col / c_out)),
        t2: Matrix::from_fn(c_out, c_in * s, |b, col| t(col % c_in, b, col / c_in)),
        t3: Matrix::from_fn(s, c_in * c_out, |i, col| t(col % c_in, col / c_in, i)),
    }
}

/// Solves `min_X ‖Z Xᵀ − T‖` for `X` (one ALS factor update).
fn update(z: &Matrix, t: &Matrix) -> Result<Matrix> {
    Ok(lstsq(z, &t.transpose())?.transpose())
}

fn objective(t1: &Matrix, u: &Matrix, c: &Matrix, v: &Matrix) -> Result<f64> {
    let fit = u.matmul_t(&khatri_rao(c, v)?);
    Ok(0.5 * t1.sub(&fit)?.frobenius().powi(2))
}

fn run(t: &Unfoldings, mut u: Matrix, mut v: Matrix, opts: &AlsOptions) -> Result<(Matrix, Matrix, Matrix, Vec<f64>)> {
    let mut c = update(&khatri_rao(&v, &u)?, &t.t3)?;
    let scale = 0.5 * t.t1.frobenius().powi(2);
    let mut history = vec![objective(&t.t1, &u, &c, &v)?];
    for _ in 0..opts.max_iters {
        u = update(&khatri_rao(&c, &v)?, &t.t1)?;
        v = update(&khatri_rao(&c, &u)?, &t.t2)?;
        c = update(&khatri_rao(&v, &u)?, &t.t3)?;
        let f = objective(&t.t1, &u, &c, &v)?;
        if !f.is_finite() {
            return Err(Error::Numeric("ALS objective became non-finite".into()));
        }
        let prev = history[history.len() - 1];
        history.push(f);
        if f <= 1e-28 * scale.max(f64::MIN_POSITIVE) || (prev - f) <= opts.tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok((u, v, c, history))
}

/// Depthwise separable decomposition of a rotated conv core `w`
/// (`(c_in·k²) × c_out`, rows `(channel, slice)`) by alternating least
/// squares, initialized from the SVD of the slice-averaged matrix.
pub fn depthwise_decompose(w: &Matrix, slices: usize, opts: &AlsOptions) -> Result<DepthwiseFactors> {
    if slices == 0 || w.rows() % slices != 0 {
        return Err(Error::Dimension(format!(
            "{} rows are not a whole number of {slices}-slice blocks",
            w.rows()
        )));
    }
    let (c_in, c_out) = (w.rows() / slices, w.cols());
    let r = opts.rank;
    if r == 0 || r > c_in.min(c_out) {
        return Err(Error::Validation(format!(
            "rank {r} must lie in 1..={} for a {c_in}x{c_out} core",
            c_in.min(c_out)
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::Config("ALS needs at least one iteration".into()));
    }
    if !w.is_finite() {
        return Err(Error::Validation("core contains non-finite values".into()));
    }
    let t = unfold(w, slices);
    let mean = Matrix::from_fn(c_in, c_out, |a, b| {
        (0..slices).map(|i| w[(a * slices + i, b)]).sum::<f64>() / slices as f64
    });
    let (lu, sigma, lv) = svd(&mean)?;
    let u0 = Matrix::from_fn(c_in, r, |a, j| lu[(a, j)] * sigma[j].max(f64::EPSILON));
    let v0 = Matrix::from_fn(c_out, r, |b, j| lv[(b, j)]);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let spread = (w.frobenius() / (w.rows() * w.cols()) as f64).max(1.0) * 1e-2;
    let mut last_err = None;
    for attempt in 0..=opts.restarts {
        let (u, v) = if attempt == 0 {
            (u0.clone(), v0.clone())
        } else {
            (
                Matrix::from_fn(c_in, r, |i, j| u0[(i, j)] + spread * jitter.sample(&mut rng)),
                Matrix::from_fn(c_out, r, |i, j| v0[(i, j)] + spread * jitter.sample(&mut rng)),
            )
        };
        match run(&t, u, v, opts) {
            Ok((u, v, c, objective)) => {
                return Ok(DepthwiseFactors {
                    u,
                    v,
                    c,
                    objective,
                    restarts: attempt,
                })
            }
            Err(e @ (Error::Singular(_) | Error::Numeric(_))) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular(format!(
        "ALS failed after {} restarts: {}",
        opts.restarts,
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Absorbs `U` into `Q_A` and `V` into `Q_S`, leaving per-channel spatial
/// kernels `D = Cᵀ` as the core.
pub fn absorb_depthwise(b: &BottleneckLayer, f: &DepthwiseFactors) -> Result<BottleneckLayer> {
    if !matches!(b.core, Core::Full(_)) || b.basis == Basis::ConvPatch {
        return Err(Error::Validation(
            "depthwise factors need a full core in a dense or channel basis".into(),
        ));
    }
    let (r, c) = b.core_dims();
    if f.u.rows() != r || f.v.rows() != c || f.c.rows() != b.geom.slices() {
        return Err(Error::Dimension(format!(
            "factors ({}, {}, {}) do not fit a {r}x{c} core with {} slices",
            f.u.rows(),
            f.v.rows(),
            f.c.rows(),
            b.geom.slices()
        )));
    }
    let rank = f.rank();
    Ok(BottleneckLayer {
        qa: b.qa.matmul(&f.u)?,
        core: Core::Depthwise(f.c.transpose()),
        qs: b.qs.matmul(&f.v)?,
        bias: b.bias.clone(),
        basis: b.basis,
        geom: b.geom,
        kept_rows: (0..rank).collect(),
        kept_cols: (0..rank).collect(),
    })
}
