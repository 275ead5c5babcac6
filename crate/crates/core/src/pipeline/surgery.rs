use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::kfac::{self, EstimateOptions, FactorVariant, KronFactors};
use crate::linalg::Matrix;
use crate::nn::{Conv, Dataset, Dense, Layer, Network, Tensor};
use crate::prune::{
    c_obd_scores, c_obs_scores, eigendamage_scores, kfac_obd_weight_scores, kfac_obs_weight_scores, kron_obd_scores,
    kron_obs_prune, kron_obs_scores, select_mask, ImportanceTable, PruneMask, Strategy, UnitKind,
};
use crate::reparam::{eigenprune, merge_bases, nested_forward, to_kfe, Basis, BottleneckLayer};

#[derive(Debug, Clone)]
pub struct PruneOptions {
    pub strategy: Strategy,
    pub ratio: f64,
    pub cap: f64,
    /// Damping applied to the factors before they are inverted.
    pub damping: f64,
    /// Eigenbasis for conv layers under `eigendamage`.
    pub conv_basis: Basis,
    pub fisher_batch_size: usize,
    pub fisher_batches: Option<usize>,
}

impl PruneOptions {
    pub fn new(strategy: Strategy, ratio: f64, cap: f64) -> Self {
        PruneOptions {
            strategy,
            ratio,
            cap,
            damping: 1e-6,
            conv_basis: Basis::ConvChannel,
            fisher_batch_size: 64,
            fisher_batches: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub network: Network,
    pub table: ImportanceTable,
    pub mask: PruneMask,
    /// Largest `|merged − nested|` output difference over re-pruned
    /// bottlenecks, measured before the mask is applied.
    pub merge_check: Option<f64>,
}

/// Weight layers a pruning pass may touch: all but the classifier.
pub fn prunable_layers(net: &Network) -> Result<Vec<usize>> {
    let mut w = net.weight_layers();
    w.pop();
    if w.is_empty() {
        return Err(Error::Validation("network has no prunable layers before the classifier".into()));
    }
    Ok(w)
}

/// The weight in the `n×m` view and its mask.
fn plain_weight(layer: &Layer) -> Option<(&Matrix, Option<&[bool]>)> {
    match layer {
        Layer::Dense(d) => Some((&d.weight, d.mask.as_deref())),
        Layer::Conv(c) => Some((&c.weight, c.mask.as_deref())),
        _ => None,
    }
}

enum Candidate {
    /// Rotated copy of a plain layer.
    Plain(BottleneckLayer),
    /// Rotation of an existing bottleneck's core, merged back on apply.
    Inner { outer: BottleneckLayer, inner: BottleneckLayer },
}

fn factor_variant(net: &Network, opts: &PruneOptions) -> Result<FactorVariant> {
    if opts.strategy != Strategy::EigenDamage || opts.conv_basis == Basis::ConvPatch {
        if opts.strategy == Strategy::EigenDamage
            && net
                .layers
                .iter()
                .any(|l| matches!(l, Layer::Bottleneck(b) if b.basis == Basis::ConvChannel))
        {
            return Err(Error::Config(
                "network has channel-basis bottlenecks; the patch conv basis cannot re-prune them".into(),
            ));
        }
        return Ok(FactorVariant::ConvFull);
    }
    Ok(FactorVariant::ConvChannel)
}

fn layer_factors(factors: &[Option<KronFactors>], l: usize) -> Result<&KronFactors> {
    factors[l]
        .as_ref()
        .ok_or_else(|| Error::State(format!("no curvature factors for layer {l}")))
}

fn check_bottleneck_strategy(layer: &Layer, l: usize, strategy: Strategy) -> Result<()> {
    if matches!(layer, Layer::Bottleneck(_)) && strategy != Strategy::EigenDamage {
        return Err(Error::Validation(format!(
            "layer {l} is a bottleneck; only eigendamage can prune it, not {strategy}"
        )));
    }
    Ok(())
}

/// Estimates curvature on `data`, scores every prunable unit, selects the
/// global mask and applies the strategy's removal rule.
pub fn prune_network(net: &Network, data: &Dataset, opts: &PruneOptions) -> Result<PruneOutcome> {
    if !(opts.ratio > 0.0 && opts.ratio < 1.0) {
        return Err(Error::Config(format!("ratio {} must lie in (0, 1)", opts.ratio)));
    }
    let layers = prunable_layers(net)?;
    for &l in &layers {
        check_bottleneck_strategy(&net.layers[l], l, opts.strategy)?;
    }
    let est = EstimateOptions {
        conv_variant: factor_variant(net, opts)?,
        batch_size: opts.fisher_batch_size,
        max_batches: opts.fisher_batches,
    };
    let factors = kfac::estimate(net, data, &est)?;

    let shapes = net.shapes()?;
    let mut table = ImportanceTable::new(opts.strategy);
    let mut candidates = BTreeMap::new();
    let mut s_inverses = BTreeMap::new();
    for &l in &layers {
        let f = layer_factors(&factors, l)?;
        let layer = &net.layers[l];
        match opts.strategy {
            Strategy::Obd | Strategy::Obs => {
                let (w, mask) = plain_weight(layer).expect("checked above");
                let scores = if opts.strategy == Strategy::Obd {
                    kfac_obd_weight_scores(w, &f.a, &f.s)?
                } else {
                    let (a_inv, s_inv) = f.damp(opts.damping)?.inverses()?;
                    kfac_obs_weight_scores(w, &a_inv, &s_inv)?
                };
                for (idx, &v) in scores.as_slice().iter().enumerate() {
                    if mask.map_or(true, |m| m[idx]) {
                        table.push(l, idx, UnitKind::Weight, v)?;
                    }
                }
            }
            Strategy::COBd | Strategy::COBs | Strategy::KronObd | Strategy::KronObs => {
                let (w, _) = plain_weight(layer).expect("checked above");
                let scores = match opts.strategy {
                    Strategy::COBd => c_obd_scores(w, &f.a, &f.s)?,
                    Strategy::COBs => {
                        let (a_inv, s_inv) = f.damp(opts.damping)?.inverses()?;
                        c_obs_scores(w, &a_inv, &s_inv)?
                    }
                    Strategy::KronObd => kron_obd_scores(w, &f.a, &f.s)?,
                    _ => {
                        let s_inv = crate::linalg::spd_inverse(&f.damp(opts.damping)?.s)?;
                        let scores = kron_obs_scores(w, &f.a, &s_inv)?;
                        s_inverses.insert(l, s_inv);
                        scores
                    }
                };
                table.extend(l, UnitKind::Filter, &scores)?;
            }
            Strategy::EigenDamage => {
                let eig = f.eigenbasis()?;
                let cand = match layer {
                    Layer::Bottleneck(outer) => {
                        let inner_basis = match outer.basis {
                            Basis::ConvChannel => Basis::ConvChannel,
                            _ => Basis::Dense,
                        };
                        let inner = to_kfe(&outer.core_layer()?, &eig, inner_basis)?;
                        Candidate::Inner {
                            outer: outer.clone(),
                            inner,
                        }
                    }
                    Layer::Dense(_) => Candidate::Plain(to_kfe(layer, &eig, Basis::Dense)?),
                    Layer::Conv(_) => Candidate::Plain(to_kfe(layer, &eig, opts.conv_basis)?),
                    _ => unreachable!("weight layer"),
                };
                let scored = match &cand {
                    Candidate::Plain(b) | Candidate::Inner { inner: b, .. } => b,
                };
                let slices = match scored.basis {
                    Basis::ConvChannel => scored.geom.slices(),
                    _ => 1,
                };
                let (mut rows, mut cols) =
                    eigendamage_scores(scored.core.matrix(), &eig.lambda_a, &eig.lambda_s, slices)?;
                if scored.basis == Basis::ConvChannel {
                    // Channel factors average over positions; the patch
                    // factor sums over the output locations.
                    let locations: usize = shapes[l + 1][1..].iter().product();
                    for v in rows.iter_mut().chain(cols.iter_mut()) {
                        *v *= locations as f64;
                    }
                }
                table.extend(l, UnitKind::KfeRow, &rows)?;
                table.extend(l, UnitKind::KfeCol, &cols)?;
                candidates.insert(l, cand);
            }
        }
    }

    let merge_check = merge_check(net, data, &candidates)?;
    let mask = select_mask(&table, opts.ratio, opts.cap)?;
    let network = match opts.strategy {
        Strategy::Obd | Strategy::Obs => apply_weight_mask(net, &mask)?,
        Strategy::EigenDamage => apply_eigen(net, &mask, candidates)?,
        _ => apply_filter_removal(net, &mask, &s_inverses)?,
    };
    Ok(PruneOutcome {
        network,
        table,
        mask,
        merge_check,
    })
}

/// Compares the merged and nested forms of every re-pruned bottleneck on
/// the layer's inputs for the first samples of `data`.
fn merge_check(net: &Network, data: &Dataset, candidates: &BTreeMap<usize, Candidate>) -> Result<Option<f64>> {
    let pairs: Vec<(usize, &BottleneckLayer, &BottleneckLayer)> = candidates
        .iter()
        .filter_map(|(&l, c)| match c {
            Candidate::Inner { outer, inner } if outer.basis != Basis::ConvPatch => Some((l, outer, inner)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let probe = data.take(32);
    let trace = net.forward_trace(&probe.inputs)?;
    let mut worst: f64 = 0.0;
    for (l, outer, inner) in pairs {
        let x = trace.layer_input(l);
        let nested = nested_forward(outer, inner, x)?;
        let merged = merge_bases(outer, &inner.qa, &inner.qs)?.forward(x)?;
        worst = worst.max(nested.max_abs_diff(&merged));
    }
    Ok(Some(worst))
}

fn apply_weight_mask(net: &Network, mask: &PruneMask) -> Result<Network> {
    let mut out = net.clone();
    for (&(l, kind), ids) in &mask.removed {
        if kind != UnitKind::Weight || ids.is_empty() {
            continue;
        }
        let (len, keep) = match &mut out.layers[l] {
            Layer::Dense(d) => (d.weight.as_slice().len(), &mut d.mask),
            Layer::Conv(c) => (c.weight.as_slice().len(), &mut c.mask),
            _ => return Err(Error::State(format!("layer {l} cannot take a weight mask"))),
        };
        let keep = keep.get_or_insert_with(|| vec![true; len]);
        for &i in ids {
            keep[i] = false;
        }
        out.layers[l].apply_mask();
    }
    Ok(out)
}

/// Rows of the next weight layer fed by each output channel of layer `l`.
fn downstream_rows(net: &Network, l: usize) -> Result<Option<(usize, Vec<Vec<usize>>)>> {
    let shapes = net.shapes()?;
    let channels = shapes[l + 1][0];
    let spatial: usize = shapes[l + 1][1..].iter().product();
    let Some(next) = (l + 1..net.layers.len()).find(|&i| net.layers[i].has_weights()) else {
        return Ok(None);
    };
    let flattened = net.layers[l + 1..next].iter().any(|x| matches!(x, Layer::Flatten));
    let rows = match &net.layers[next] {
        Layer::Dense(_) if flattened => (0..channels)
            .map(|ch| (ch * spatial..(ch + 1) * spatial).collect())
            .collect(),
        Layer::Dense(_) => (0..channels).map(|ch| vec![ch]).collect(),
        Layer::Conv(c) => {
            let s = c.geom.slices();
            (0..channels).map(|ch| (ch * s..(ch + 1) * s).collect()).collect()
        }
        other => {
            return Err(Error::Validation(format!(
                "cannot remove channels feeding a {} layer",
                other.name()
            )))
        }
    };
    Ok(Some((next, rows)))
}

fn select(
    weight: &Matrix,
    mask: Option<&[bool]>,
    rows: &[usize],
    cols: &[usize],
) -> (Matrix, Option<Vec<bool>>) {
    let w = weight.select_rows(rows).select_columns(cols);
    let m = mask.map(|m| {
        rows.iter()
            .flat_map(|&r| cols.iter().map(move |&c| m[r * weight.cols() + c]))
            .collect()
    });
    (w, m)
}

/// Physically removes pruned filters: their weight columns and biases, and
/// the input rows of the next weight layer that read them.
fn apply_filter_removal(net: &Network, mask: &PruneMask, s_inverses: &BTreeMap<usize, Matrix>) -> Result<Network> {
    let mut layers = net.layers.clone();
    let mut keep_rows: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    let mut keep_cols: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for (&(l, kind), ids) in &mask.removed {
        if kind != UnitKind::Filter || ids.is_empty() {
            continue;
        }
        let (w, _) = plain_weight(&net.layers[l]).ok_or_else(|| Error::State(format!("layer {l} has no filters")))?;
        if ids.len() >= w.cols() {
            return Err(Error::State(format!("pruning would remove every filter of layer {l}")));
        }
        if let Some(s_inv) = s_inverses.get(&l) {
            let updated = kron_obs_prune(w, s_inv, ids)?;
            match &mut layers[l] {
                Layer::Dense(d) => d.weight = updated,
                Layer::Conv(c) => c.weight = updated,
                _ => unreachable!(),
            }
            layers[l].apply_mask();
        }
        let mut cols = vec![true; w.cols()];
        for &j in ids {
            cols[j] = false;
        }
        if let Some((next, feeds)) = downstream_rows(net, l)? {
            let n_rows = plain_weight(&net.layers[next]).map(|(w, _)| w.rows()).unwrap_or(0);
            let rows = keep_rows.entry(next).or_insert_with(|| vec![true; n_rows]);
            for &j in ids {
                for &r in &feeds[j] {
                    rows[r] = false;
                }
            }
        }
        keep_cols.insert(l, cols);
    }
    let touched: BTreeSet<usize> = keep_rows.keys().chain(keep_cols.keys()).copied().collect();
    for l in touched {
        let (w, m) = plain_weight(&layers[l]).expect("plain layer");
        let rows = keep_rows.get(&l).map_or_else(|| (0..w.rows()).collect(), |k| indices(k));
        let cols = keep_cols.get(&l).map_or_else(|| (0..w.cols()).collect(), |k| indices(k));
        let (nw, nm) = select(w, m, &rows, &cols);
        layers[l] = match &layers[l] {
            Layer::Dense(d) => {
                let mut nd = Dense::new(nw, cols.iter().map(|&j| d.bias[j]).collect())?;
                nd.mask = nm;
                Layer::Dense(nd)
            }
            Layer::Conv(c) => {
                let s = c.geom.slices();
                let mut nc = Conv::new(nw, cols.iter().map(|&j| c.bias[j]).collect(), rows.len() / s, c.geom)?;
                nc.mask = nm;
                Layer::Conv(nc)
            }
            _ => unreachable!(),
        };
    }
    Network::new(layers, net.input_shape.clone())
}

fn indices(keep: &[bool]) -> Vec<usize> {
    (0..keep.len()).filter(|&i| keep[i]).collect()
}

/// Plain layer computing the bottleneck's effective weight.
fn collapse(b: &BottleneckLayer) -> Result<Layer> {
    let w = b.effective_weight();
    match b.basis {
        Basis::Dense => Ok(Layer::Dense(Dense::new(w, b.bias.clone())?)),
        _ => Ok(Layer::Conv(Conv::new(w, b.bias.clone(), b.n_in(), b.geom)?)),
    }
}

/// Prunes rows and columns in the eigenbasis. A layer whose pruned
/// bottleneck would hold at least as many parameters as the plain layer
/// is stored as the plain (low-rank) layer instead.
fn apply_eigen(net: &Network, mask: &PruneMask, candidates: BTreeMap<usize, Candidate>) -> Result<Network> {
    let mut layers = net.layers.clone();
    for (l, cand) in candidates {
        let rows = mask.removed(l, UnitKind::KfeRow);
        let cols = mask.removed(l, UnitKind::KfeCol);
        if rows.is_empty() && cols.is_empty() {
            continue;
        }
        let pruned = match &cand {
            Candidate::Plain(b) => eigenprune(b, rows, cols)?,
            Candidate::Inner { outer, inner } => {
                let inner = eigenprune(inner, rows, cols)?;
                merge_bases(outer, &inner.qa, &inner.qs)?
            }
        };
        let plain = pruned.effective_weight();
        let plain_params = plain.rows() * plain.cols() + pruned.bias.len();
        layers[l] = if pruned.param_count() >= plain_params {
            collapse(&pruned)?
        } else {
            Layer::Bottleneck(pruned)
        };
    }
    Network::new(layers, net.input_shape.clone())
}

/// Largest output difference between two networks on `x`.
pub fn output_gap(a: &Network, b: &Network, x: &Tensor) -> Result<f64> {
    Ok(a.forward(x)?.max_abs_diff(&b.forward(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{synth_dataset, Split, SynthKind, SynthSpec};
    use crate::pipeline::accounting::count_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cnn(seed: u64) -> (Network, Dataset) {
        let mut spec = SynthSpec::new(SynthKind::Stripes, seed, 48, 4);
        spec.size = 6;
        let data = synth_dataset(&spec, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::cnn([1, 6, 6], &[4, 6], &[1, 2], 4, &mut rng).unwrap();
        (net, data)
    }

    fn toy_mlp(seed: u64) -> (Network, Dataset) {
        let data = synth_dataset(&SynthSpec::new(SynthKind::Blobs, seed, 40, 3), Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Network::mlp(2, &[8, 6], 3, &mut rng).unwrap(), data)
    }

    #[test]
    fn every_strategy_runs_and_respects_cap() {
        for (net, data) in [toy_cnn(1), toy_mlp(2)] {
            for s in Strategy::ALL {
                let out = prune_network(&net, &data, &PruneOptions::new(s, 0.5, 0.5)).unwrap();
                for (key, ids) in &out.mask.removed {
                    assert!(ids.len() as f64 <= 0.5 * out.mask.group_sizes[key] as f64, "{s}");
                }
                assert!(count_params(&out.network) <= count_params(&net), "{s}");
                assert!(out.network.forward(&data.inputs).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn filter_removal_matches_zeroed_columns() {
        let (net, data) = toy_cnn(4);
        let out = prune_network(&net, &data, &PruneOptions::new(Strategy::KronObd, 0.4, 0.95)).unwrap();
        let mut zeroed = net.clone();
        for (&(l, _), ids) in &out.mask.removed {
            let Layer::Conv(c) = &mut zeroed.layers[l] else { panic!() };
            for &j in ids {
                c.weight.set_column(j, &vec![0.0; c.weight.rows()]);
                c.bias[j] = 0.0;
            }
        }
        assert!(output_gap(&zeroed, &out.network, &data.inputs).unwrap() < 1e-12);
    }

    #[test]
    fn kron_obs_zeroes_pruned_filters_before_removal() {
        let (net, data) = toy_mlp(5);
        let out = prune_network(&net, &data, &PruneOptions::new(Strategy::KronObs, 0.3, 0.95)).unwrap();
        assert!(!out.mask.is_empty());
        let kept: usize = out
            .mask
            .group_sizes
            .iter()
            .map(|(k, n)| n - out.mask.removed(k.0, k.1).len())
            .sum();
        let widths: usize = prunable_layers(&out.network)
            .unwrap()
            .iter()
            .map(|&l| plain_weight(&out.network.layers[l]).unwrap().0.cols())
            .sum();
        assert_eq!(kept, widths);
    }

    #[test]
    fn weight_masks_exclude_pruned_weights_next_time() {
        let (net, data) = toy_mlp(6);
        let once = prune_network(&net, &data, &PruneOptions::new(Strategy::Obd, 0.5, 0.95)).unwrap();
        let twice = prune_network(&once.network, &data, &PruneOptions::new(Strategy::Obd, 0.5, 0.95)).unwrap();
        assert_eq!(twice.table.len(), once.table.len() - once.mask.removed_count());
        assert!(count_params(&twice.network) < count_params(&once.network));
    }

    #[test]
    fn eigendamage_rounds_merge_exactly() {
        let (net, data) = toy_cnn(7);
        let first = prune_network(&net, &data, &PruneOptions::new(Strategy::EigenDamage, 0.5, 0.5)).unwrap();
        assert_eq!(first.merge_check, None);
        assert!(first.network.layers.iter().any(|l| matches!(l, Layer::Bottleneck(_))));
        let second = prune_network(&first.network, &data, &PruneOptions::new(Strategy::EigenDamage, 0.5, 0.5)).unwrap();
        assert!(second.merge_check.unwrap() < 1e-10);
        assert!(count_params(&second.network) < count_params(&first.network));
    }

    #[test]
    fn bottlenecks_reject_other_strategies() {
        let (net, data) = toy_cnn(8);
        let first = prune_network(&net, &data, &PruneOptions::new(Strategy::EigenDamage, 0.5, 0.5)).unwrap();
        let err = prune_network(&first.network, &data, &PruneOptions::new(Strategy::KronObd, 0.5, 0.5)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
