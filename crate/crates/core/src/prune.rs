//! Pruning criteria and global mask selection.
//!
//! Weight matrices use the `n × m` layout of the layers: column `j` holds
//! the incoming weights of output unit (filter) `j`, `A` is `n × n` and `S`
//! is `m × m`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Weight,
    Filter,
    KfeRow,
    KfeCol,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::Weight => "weight",
            UnitKind::Filter => "filter",
            UnitKind::KfeRow => "kfe_row",
            UnitKind::KfeCol => "kfe_col",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "obd")]
    Obd,
    #[serde(rename = "obs")]
    Obs,
    #[serde(rename = "c-obd")]
    COBd,
    #[serde(rename = "c-obs")]
    COBs,
    #[serde(rename = "kron-obd")]
    KronObd,
    #[serde(rename = "kron-obs")]
    KronObs,
    #[serde(rename = "eigendamage")]
    EigenDamage,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Obd,
        Strategy::Obs,
        Strategy::COBd,
        Strategy::COBs,
        Strategy::KronObd,
        Strategy::KronObs,
        Strategy::EigenDamage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Obd => "obd",
            Strategy::Obs => "obs",
            Strategy::COBd => "c-obd",
            Strategy::COBs => "c-obs",
            Strategy::KronObd => "kron-obd",
            Strategy::KronObs => "kron-obs",
            Strategy::EigenDamage => "eigendamage",
        }
    }

    /// Whether the strategy scores individual weights rather than units.
    pub fn is_weight_level(self) -> bool {
        matches!(self, Strategy::Obd | Strategy::Obs)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub layer: usize,
    pub unit: usize,
    pub kind: UnitKind,
    pub delta_l: f64,
}

/// Predicted loss increase for removing each unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub strategy: Strategy,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceTable {
    pub fn new(strategy: Strategy) -> Self {
        ImportanceTable {
            strategy,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: usize, unit: usize, kind: UnitKind, delta_l: f64) -> Result<()> {
        if !delta_l.is_finite() || delta_l < -1e-8 {
            return Err(Error::Numeric(format!(
                "score {delta_l} for layer {layer} {} {unit} is not a valid loss increase",
                kind.as_str()
            )));
        }
        self.entries.push(ImportanceEntry {
            layer,
            unit,
            kind,
            delta_l,
        });
        Ok(())
    }

    /// Appends one score per unit, numbered from zero.
    pub fn extend(&mut self, layer: usize, kind: UnitKind, scores: &[f64]) -> Result<()> {
        for (unit, &delta_l) in scores.iter().enumerate() {
            self.push(layer, unit, kind, delta_l)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unit counts per `(layer, kind)` group.
    pub fn group_sizes(&self) -> BTreeMap<(usize, UnitKind), usize> {
        let mut sizes = BTreeMap::new();
        for e in &self.entries {
            *sizes.entry((e.layer, e.kind)).or_insert(0) += 1;
        }
        sizes
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,unit_kind,unit_id,delta_L,strategy\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:e},{}\n",
                e.layer,
                e.kind.as_str(),
                e.unit,
                e.delta_l,
                self.strategy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn check_square(m: &Matrix, n: usize, what: &str) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "{what} is {:?} but the weight needs {n}x{n}",
            m.shape()
        )));
    }
    Ok(())
}

fn positive_diag(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    let d = m.diag();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Singular(format!("{what} has a non-positive diagonal entry")));
    }
    Ok(d)
}

/// `½θ_q²H_qq` per weight.
pub fn obd_scores(theta: &[f64], h_diag: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != h_diag.len() {
        return Err(Error::Dimension(format!(
            "{} weights but {} curvature entries",
            theta.len(),
            h_diag.len()
        )));
    }
    if h_diag.iter().any(|&h| h < 0.0) {
        return Err(Error::Validation("diagonal curvature must be non-negative".into()));
    }
    Ok(theta.iter().zip(h_diag).map(|(t, h)| 0.5 * t * t * h).collect())
}

/// `½θ_q²/[H⁻¹]_qq` per weight.
pub fn obs_scores(theta: &[f64], h_inv: &Matrix) -> Result<Vec<f64>> {
    check_square(h_inv, theta.len(), "H⁻¹")?;
    let d = positive_diag(h_inv, "H⁻¹")?;
    Ok(theta.iter().zip(&d).map(|(t, h)| 0.5 * t * t / h).collect())
}

/// Compensating move for removing weight `q`: `−θ_q/[H⁻¹]_qq · H⁻¹e_q`.
pub fn obs_update(theta: &[f64], h_inv: &Matrix, q: usize) -> Result<Vec<f64>> {
    check_square(h_inv, theta.len(), "H⁻¹")?;
    if q >= theta.len() {
        return Err(Error::Validation(format!("weight {q} out of range {}", theta.len())));
    }
    let hqq = h_inv[(q, q)];
    if !(hqq > 0.0) {
        return Err(Error::Singular(format!("[H⁻¹]_qq = {hqq}")));
    }
    let scale = theta[q] / hqq;
    let mut d: Vec<f64> = (0..theta.len()).map(|k| -scale * h_inv[(k, q)]).collect();
    d[q] = -theta[q];
    Ok(d)
}

fn check_factors(w: &Matrix, a: &Matrix, s: &Matrix) -> Result<()> {
    check_square(a, w.rows(), "A")?;
    check_square(s, w.cols(), "S")
}

/// Weight-level OBD under `F ≈ S ⊗ A`, whose diagonal is `A_ii S_jj`;
/// scores are laid out like `w` (row-major).
pub fn kfac_obd_weight_scores(w: &Matrix, a: &Matrix, s: &Matrix) -> Result<Matrix> {
    check_factors(w, a, s)?;
    let (da, ds) = (a.diag(), s.diag());
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| 0.5 * w[(i, j)].powi(2) * da[i] * ds[j]))
}

/// Weight-level OBS under `F⁻¹ ≈ S⁻¹ ⊗ A⁻¹`: `[F⁻¹]_qq = [A⁻¹]_ii [S⁻¹]_jj`.
pub fn kfac_obs_weight_scores(w: &Matrix, a_inv: &Matrix, s_inv: &Matrix) -> Result<Matrix> {
    check_factors(w, a_inv, s_inv)?;
    let da = positive_diag(a_inv, "A⁻¹")?;
    let ds = positive_diag(s_inv, "S⁻¹")?;
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| 0.5 * w[(i, j)].powi(2) / (da[i] * ds[j])))
}

/// Weight-level OBS move under the Kronecker inverse:
/// `ΔW = −W_ij/([A⁻¹]_ii[S⁻¹]_jj) · A⁻¹e_i e_jᵀS⁻¹`.
pub fn kfac_obs_weight_update(w: &Matrix, a_inv: &Matrix, s_inv: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    check_factors(w, a_inv, s_inv)?;
    if i >= w.rows() || j >= w.cols() {
        return Err(Error::Validation(format!("weight ({i}, {j}) out of range {:?}", w.shape())));
    }
    let denom = a_inv[(i, i)] * s_inv[(j, j)];
    if !(denom > 0.0) {
        return Err(Error::Singular("inverse factor diagonal is not positive".into()));
    }
    let scale = w[(i, j)] / denom;
    let mut d = Matrix::from_fn(w.rows(), w.cols(), |r, c| -scale * a_inv[(r, i)] * s_inv[(j, c)]);
    d.row_mut(i)[j] = -w[(i, j)];
    Ok(d)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..m.rows()).map(|i| m[(i, j)]).sum()).collect()
}

/// Per-filter sums of weight-level OBD scores.
pub fn c_obd_scores(w: &Matrix, a: &Matrix, s: &Matrix) -> Result<Vec<f64>> {
    Ok(column_sums(&kfac_obd_weight_scores(w, a, s)?))
}

/// Per-filter sums of weight-level OBS scores.
pub fn c_obs_scores(w: &Matrix, a_inv: &Matrix, s_inv: &Matrix) -> Result<Vec<f64>> {
    Ok(column_sums(&kfac_obs_weight_scores(w, a_inv, s_inv)?))
}

/// `θ_iᵀAθ_i` for every column.
fn column_quadratics(w: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
    let aw = a.matmul(w)?;
    Ok((0..w.cols())
        .map(|j| (0..w.rows()).map(|i| w[(i, j)] * aw[(i, j)]).sum())
        .collect())
}

/// `½ S_ii θ_iᵀ A θ_i` per filter.
pub fn kron_obd_scores(w: &Matrix, a: &Matrix, s: &Matrix) -> Result<Vec<f64>> {
    check_factors(w, a, s)?;
    let q = column_quadratics(w, a)?;
    Ok(q.iter().zip(s.diag()).map(|(q, sii)| 0.5 * sii * q).collect())
}

/// `½ θ_iᵀ A θ_i / [S⁻¹]_ii` per filter.
pub fn kron_obs_scores(w: &Matrix, a: &Matrix, s_inv: &Matrix) -> Result<Vec<f64>> {
    check_factors(w, a, s_inv)?;
    let d = positive_diag(s_inv, "S⁻¹")?;
    let q = column_quadratics(w, a)?;
    Ok(q.iter().zip(d).map(|(q, sii)| 0.5 * q / sii).collect())
}

/// Compensating move for removing filter `i`: `ΔW = −(θ_i/[S⁻¹]_ii) e_iᵀS⁻¹`.
pub fn kron_obs_update(w: &Matrix, s_inv: &Matrix, i: usize) -> Result<Matrix> {
    check_square(s_inv, w.cols(), "S⁻¹")?;
    if i >= w.cols() {
        return Err(Error::Validation(format!("filter {i} out of range {}", w.cols())));
    }
    let sii = s_inv[(i, i)];
    if !(sii > 0.0) {
        return Err(Error::Singular(format!("[S⁻¹]_ii = {sii}")));
    }
    let theta = w.column(i);
    let mut d = Matrix::from_fn(w.rows(), w.cols(), |r, c| -theta[r] * s_inv[(i, c)] / sii);
    d.set_column(i, &theta.iter().map(|t| -t).collect::<Vec<_>>());
    Ok(d)
}

/// Removes several filters one after another. Each removal uses the
/// current weights and the inverse of `S` restricted to the filters still
/// present, so earlier removals stay exactly zero; the result equals the
/// joint constrained optimum under `F = S ⊗ A`.
pub fn kron_obs_prune(w: &Matrix, s_inv: &Matrix, filters: &[usize]) -> Result<Matrix> {
    check_square(s_inv, w.cols(), "S⁻¹")?;
    let mut w = w.clone();
    let mut sinv = s_inv.clone();
    for &i in filters {
        let d = kron_obs_update(&w, &sinv, i)?;
        w = w.add(&d)?;
        w.set_column(i, &vec![0.0; w.rows()]);
        let sii = sinv[(i, i)];
        let col = sinv.column(i);
        let down = Matrix::outer(&col, &col).scale(1.0 / sii);
        sinv = sinv.sub(&down)?;
        // Decouple the removed filter without losing invertibility.
        for k in 0..sinv.rows() {
            sinv.row_mut(i)[k] = 0.0;
            sinv.row_mut(k)[i] = 0.0;
        }
        sinv.row_mut(i)[i] = 1.0;
    }
    Ok(w)
}

/// EigenDamage scores `Θ = W′² ⊙ λ_A λ_Sᵀ` summed over rows and columns.
/// `slices` rows of `W′` share one `λ_A` entry and form one row unit (the
/// spatial offsets of a rotated conv channel); use 1 for plain matrices.
pub fn eigendamage_scores(wp: &Matrix, lambda_a: &[f64], lambda_s: &[f64], slices: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if slices == 0 || wp.rows() != lambda_a.len() * slices || wp.cols() != lambda_s.len() {
        return Err(Error::Dimension(format!(
            "W′ {:?} does not match {} input and {} output eigenvalues with {slices} slices",
            wp.shape(),
            lambda_a.len(),
            lambda_s.len()
        )));
    }
    let mut rows = vec![0.0; lambda_a.len()];
    let mut cols = vec![0.0; lambda_s.len()];
    for r in 0..wp.rows() {
        let la = lambda_a[r / slices];
        for c in 0..wp.cols() {
            let theta = wp[(r, c)].powi(2) * la * lambda_s[c];
            rows[r / slices] += theta;
            cols[c] += theta;
        }
    }
    Ok((rows, cols))
}

/// Units chosen for removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub ratio: f64,
    pub cap: f64,
    /// `None` when the ratio selects no score at all.
    pub threshold: Option<f64>,
    /// Removed unit ids per `(layer, kind)`, ascending.
    pub removed: BTreeMap<(usize, UnitKind), Vec<usize>>,
    pub group_sizes: BTreeMap<(usize, UnitKind), usize>,
}

impl PruneMask {
    pub fn removed(&self, layer: usize, kind: UnitKind) -> &[usize] {
        self.removed.get(&(layer, kind)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn kept(&self, layer: usize, kind: UnitKind) -> Vec<usize> {
        let n = self.group_sizes.get(&(layer, kind)).copied().unwrap_or(0);
        let gone = self.removed(layer, kind);
        (0..n).filter(|u| gone.binary_search(u).is_err()).collect()
    }

    pub fn removed_count(&self) -> usize {
        self.removed.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.removed_count() == 0
    }
}

/// Global threshold selection. `τ` is the `k`-th smallest pooled score with
/// `k = ⌊p·N⌋` (no threshold when `k = 0`); units with `ΔL ≤ τ` are removed.
/// Each `(layer, kind)` group loses at most `⌊cap·n⌋` units: the surplus
/// with the largest scores is kept, and among equal scores lower ids go
/// first.
pub fn select_mask(table: &ImportanceTable, ratio: f64, cap: f64) -> Result<PruneMask> {
    if table.is_empty() {
        return Err(Error::Validation("cannot select a mask from an empty importance table".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("pruning ratio {ratio} must lie in (0, 1)")));
    }
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::Config(format!("per-layer cap {cap} must lie in (0, 1]")));
    }
    let mut pooled: Vec<f64> = table.entries.iter().map(|e| e.delta_l).collect();
    pooled.sort_by(f64::total_cmp);
    let k = (ratio * pooled.len() as f64).floor() as usize;
    let threshold = (k > 0).then(|| pooled[k - 1]);
    let group_sizes = table.group_sizes();
    let mut candidates: BTreeMap<(usize, UnitKind), Vec<(f64, usize)>> = BTreeMap::new();
    if let Some(tau) = threshold {
        for e in &table.entries {
            if e.delta_l <= tau {
                candidates.entry((e.layer, e.kind)).or_default().push((e.delta_l, e.unit));
            }
        }
    }
    let mut removed = BTreeMap::new();
    for (key, mut units) in candidates {
        let allowed = (cap * group_sizes[&key] as f64 + 1e-9).floor() as usize;
        units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        units.truncate(allowed);
        let mut ids: Vec<usize> = units.into_iter().map(|(_, u)| u).collect();
        ids.sort_unstable();
        if !ids.is_empty() {
            removed.insert(key, ids);
        }
    }
    Ok(PruneMask {
        ratio,
        cap,
        threshold,
        removed,
        group_sizes,
    })
}
