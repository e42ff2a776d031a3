//! Server-side aggregation rules.
//!
//! The parameter rules ([`agg_mean`], [`agg_median`], [`trimmed_mean`],
//! [`agg_krum`], [`agg_bulyan`], [`agg_mwu`]) take one update vector per party.
//! [`agg_cronus`] takes one prediction matrix per party and runs a spectral
//! outlier filter independently on every row.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, covariance_about, dot, l2_distance, squared_distance, top_eigenpair, weighted_median,
    Matrix, NumericsError, RealVector,
};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{sizes} data sizes for {updates} updates")]
    DataSizeCount { sizes: usize, updates: usize },
    #[error("epsilon {0} outside [0, 0.5)")]
    InvalidEpsilon(f64),
    #[error("{rule} needs {detail}")]
    TooFewParties { rule: &'static str, detail: String },
    #[error("weight collapse: every party weight underflowed to zero")]
    WeightCollapse,
    #[error("prediction matrix of party {party} is {found_rows}x{found_cols}, expected {rows}x{cols}")]
    ShapeMismatch {
        party: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("the cronus rule aggregates prediction matrices, not parameter vectors")]
    NotAVectorRule,
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// Counts derived from fractional expressions like `(1 - 2ε)n` are rounded
/// with this slack so that `ε = m/n` lands on the intended integer.
const COUNT_SLACK: f64 = 1e-9;

fn ceil_count(x: f64) -> usize {
    (x - COUNT_SLACK).ceil().max(0.0) as usize
}

fn floor_count(x: f64) -> isize {
    (x + COUNT_SLACK).floor() as isize
}

/// One aggregation call's inputs: one update per party, in party order.
#[derive(Debug, Clone, Copy)]
pub struct AggregationInput<'a> {
    updates: &'a [RealVector],
    data_sizes: Option<&'a [usize]>,
    epsilon: f64,
}

impl<'a> AggregationInput<'a> {
    pub fn new(
        updates: &'a [RealVector],
        data_sizes: Option<&'a [usize]>,
        epsilon: f64,
    ) -> Result<Self> {
        if updates.is_empty() {
            return Err(AggregationError::Empty);
        }
        let dim = updates[0].len();
        if let Some((index, u)) = updates.iter().enumerate().find(|(_, u)| u.len() != dim) {
            return Err(NumericsError::DimensionMismatch {
                index,
                expected: dim,
                found: u.len(),
            }
            .into());
        }
        if let Some(sizes) = data_sizes {
            if sizes.len() != updates.len() {
                return Err(AggregationError::DataSizeCount {
                    sizes: sizes.len(),
                    updates: updates.len(),
                });
            }
        }
        if !(0.0..0.5).contains(&epsilon) {
            return Err(AggregationError::InvalidEpsilon(epsilon));
        }
        Ok(Self {
            updates,
            data_sizes,
            epsilon,
        })
    }

    pub fn updates(&self) -> &'a [RealVector] {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.updates[0].len()
    }

    /// `|D_i|` as weights, or all ones.
    fn party_weights(&self) -> Vec<f64> {
        match self.data_sizes {
            Some(s) => s.iter().map(|&x| x as f64).collect(),
            None => vec![1.0; self.updates.len()],
        }
    }
}

/// Data-size weighted mean of the updates.
pub fn agg_mean(input: &AggregationInput<'_>) -> Result<RealVector> {
    let w = input.party_weights();
    Ok(numerics::mean_vec(input.updates, Some(&w))?)
}

/// Coordinate-wise weighted median (lower-median convention).
pub fn agg_median(input: &AggregationInput<'_>) -> Result<RealVector> {
    let w = input.party_weights();
    let mut column = vec![0.0; input.len()];
    (0..input.dim())
        .map(|j| {
            for (c, u) in column.iter_mut().zip(input.updates) {
                *c = u[j];
            }
            Ok(weighted_median(&column, &w)?)
        })
        .collect()
}

/// Coordinate-wise mean of the `⌈(1 − 2ε)n⌉` values nearest the median.
///
/// Distance ties keep the lower party index.
pub fn trimmed_mean<V: AsRef<[f64]>>(updates: &[V], epsilon: f64) -> Result<RealVector> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    if !(0.0..0.5).contains(&epsilon) {
        return Err(AggregationError::InvalidEpsilon(epsilon));
    }
    let n = updates.len();
    let dim = updates[0].as_ref().len();
    if let Some((index, u)) = updates.iter().enumerate().find(|(_, u)| u.as_ref().len() != dim) {
        return Err(NumericsError::DimensionMismatch {
            index,
            expected: dim,
            found: u.as_ref().len(),
        }
        .into());
    }
    let keep = ceil_count((1.0 - 2.0 * epsilon) * n as f64).min(n);
    if keep == 0 {
        return Err(AggregationError::TooFewParties {
            rule: "trimmed mean",
            detail: format!("(1 - 2ε)n ≥ 1, got n = {n}, ε = {epsilon}"),
        });
    }
    let mut column = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.as_ref()[j];
        }
        let med = numerics::median(&column)?;
        order.sort_by(|&a, &b| {
            (column[a] - med)
                .abs()
                .total_cmp(&(column[b] - med).abs())
                .then(a.cmp(&b))
        });
        let sum: f64 = order[..keep].iter().map(|&i| column[i]).sum();
        out.push(sum / keep as f64);
        order.sort_unstable();
    }
    Ok(out)
}

/// Krum over `candidates` (indices into `updates`), with `neighbors` nearest
/// neighbours per score. Returns the position within `candidates`.
fn krum_select(updates: &[RealVector], candidates: &[usize], neighbors: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    let mut dists = Vec::with_capacity(candidates.len());
    for (pos, &i) in candidates.iter().enumerate() {
        dists.clear();
        dists.extend(
            candidates
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| squared_distance(&updates[i], &updates[j])),
        );
        dists.sort_by(f64::total_cmp);
        let score: f64 = dists.iter().take(neighbors).sum();
        if score < best.0 || (pos == 0 && best.0.is_infinite()) {
            best = (score, pos);
        }
    }
    best.1
}

fn krum_neighbors(n: usize, epsilon: f64) -> isize {
    floor_count((1.0 - epsilon) * n as f64 - 2.0)
}

/// Krum: the update whose `(1 − ε)n − 2` nearest neighbours are closest in
/// squared L2. Ties go to the lowest party index.
pub fn agg_krum(input: &AggregationInput<'_>) -> Result<(RealVector, usize)> {
    let n = input.len();
    let k = krum_neighbors(n, input.epsilon);
    if k < 1 || k as usize > n - 1 {
        return Err(AggregationError::TooFewParties {
            rule: "krum",
            detail: format!("(1 - ε)n - 2 ≥ 1 neighbours, got n = {n}, ε = {}", input.epsilon),
        });
    }
    let candidates: Vec<usize> = (0..n).collect();
    let idx = krum_select(input.updates, &candidates, k as usize);
    Ok((input.updates[idx].clone(), idx))
}

/// The updates Bulyan selects, in selection order, before trimming.
pub fn bulyan_selection(input: &AggregationInput<'_>) -> Result<Vec<usize>> {
    let n = input.len();
    let target = ceil_count((1.0 - 2.0 * input.epsilon) * n as f64).min(n);
    if target == 0 {
        return Err(AggregationError::TooFewParties {
            rule: "bulyan",
            detail: format!("(1 - 2ε)n ≥ 1, got n = {n}, ε = {}", input.epsilon),
        });
    }
    if target > 1 && krum_neighbors(n, input.epsilon) < 1 {
        return Err(AggregationError::TooFewParties {
            rule: "bulyan",
            detail: format!("krum neighbours ≥ 1 on the full set, got n = {n}, ε = {}", input.epsilon),
        });
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::with_capacity(target);
    while selected.len() < target {
        let pos = match remaining.len() {
            0 => {
                return Err(AggregationError::TooFewParties {
                    rule: "bulyan",
                    detail: "candidate set exhausted before selection completed".into(),
                })
            }
            1 => 0,
            // Late in the loop the shrinking set can drop below Krum's
            // neighbour requirement; score against at least one neighbour.
            m => {
                let k = krum_neighbors(m, input.epsilon).clamp(1, m as isize - 1) as usize;
                krum_select(input.updates, &remaining, k)
            }
        };
        selected.push(remaining.remove(pos));
    }
    Ok(selected)
}

/// Bulyan: repeated Krum selection into `S`, then [`trimmed_mean`] over `S`.
pub fn agg_bulyan(input: &AggregationInput<'_>) -> Result<RealVector> {
    let selected = bulyan_selection(input)?;
    let chosen: Vec<&[f64]> = selected.iter().map(|&i| input.updates[i].as_slice()).collect();
    trimmed_mean(&chosen, input.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuVariant {
    /// Multiplicative decay `w ← w·exp(−‖aggregate − update‖)`.
    Avg,
    /// Log-ratio weights `w = −log(d / Σd)`, `d` the distance to the aggregate.
    Opt,
}

pub const DEFAULT_MWU_ITERS: usize = 10;

/// Relative distance below which a party is treated as coinciding with the
/// current aggregate in the log-ratio variant.
const MWU_COINCIDENT_RATIO: f64 = 1e-12;

/// Weights after `iters` rounds of multiplicative-weights aggregation, and the
/// resulting aggregate.
pub fn mwu_trace(
    input: &AggregationInput<'_>,
    variant: MwuVariant,
    iters: usize,
) -> Result<(Vec<f64>, RealVector)> {
    if iters == 0 {
        return Err(AggregationError::TooFewParties {
            rule: "mwu",
            detail: "at least one iteration".into(),
        });
    }
    let updates = input.updates;
    let mut aggregate = agg_mean(input)?;
    let mut weights = vec![1.0; updates.len()];
    for _ in 0..iters {
        let dists: Vec<f64> = updates
            .iter()
            .map(|u| l2_distance(&aggregate, u))
            .collect::<std::result::Result<_, _>>()?;
        match variant {
            MwuVariant::Avg => {
                for (w, d) in weights.iter_mut().zip(&dists) {
                    *w *= (-d).exp();
                }
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) || !total.is_finite() {
                    return Err(AggregationError::WeightCollapse);
                }
                aggregate = numerics::mean_vec(updates, Some(&weights))?;
            }
            MwuVariant::Opt => {
                let total: f64 = dists.iter().sum();
                if total == 0.0 {
                    // Every update coincides with the aggregate.
                    break;
                }
                let coincident: Vec<usize> = (0..updates.len())
                    .filter(|&i| dists[i] / total < MWU_COINCIDENT_RATIO)
                    .collect();
                if !coincident.is_empty() {
                    // −log(d/Σd) → ∞: the normalized aggregate is the mean of
                    // the coinciding parties, all other weights vanish.
                    for (i, w) in weights.iter_mut().enumerate() {
                        *w = if coincident.contains(&i) { 1.0 } else { 0.0 };
                    }
                } else {
                    for (w, d) in weights.iter_mut().zip(&dists) {
                        *w = -(d / total).ln();
                    }
                }
                if !(weights.iter().sum::<f64>() > 0.0) {
                    return Err(AggregationError::WeightCollapse);
                }
                aggregate = numerics::mean_vec(updates, Some(&weights))?;
            }
        }
    }
    Ok((weights, aggregate))
}

/// Multiplicative-weights aggregation for a fixed number of iterations.
pub fn agg_mwu(input: &AggregationInput<'_>, variant: MwuVariant, iters: usize) -> Result<RealVector> {
    Ok(mwu_trace(input, variant, iters)?.1)
}

/// Every rule a protocol can be configured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Median,
    MwuAvg,
    MwuOpt,
    Krum,
    Bulyan,
    Cronus,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 7] = [
        AggregatorKind::Mean,
        AggregatorKind::Median,
        AggregatorKind::MwuAvg,
        AggregatorKind::MwuOpt,
        AggregatorKind::Krum,
        AggregatorKind::Bulyan,
        AggregatorKind::Cronus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::Median => "median",
            AggregatorKind::MwuAvg => "mwu_avg",
            AggregatorKind::MwuOpt => "mwu_opt",
            AggregatorKind::Krum => "krum",
            AggregatorKind::Bulyan => "bulyan",
            AggregatorKind::Cronus => "cronus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Aggregates parameter vectors. Fails for [`AggregatorKind::Cronus`].
    pub fn aggregate(self, input: &AggregationInput<'_>, mwu_iters: usize) -> Result<RealVector> {
        match self {
            AggregatorKind::Mean => agg_mean(input),
            AggregatorKind::Median => agg_median(input),
            AggregatorKind::MwuAvg => agg_mwu(input, MwuVariant::Avg, mwu_iters),
            AggregatorKind::MwuOpt => agg_mwu(input, MwuVariant::Opt, mwu_iters),
            AggregatorKind::Krum => agg_krum(input).map(|(v, _)| v),
            AggregatorKind::Bulyan => agg_bulyan(input),
            AggregatorKind::Cronus => Err(AggregationError::NotAVectorRule),
        }
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// A fixed number of deterministic trimming passes.
    #[default]
    Practical,
    /// Random-threshold filtering until the top eigenvalue is small.
    Randomized,
}

/// What the per-pass removal fraction `ε/2` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemovalBase {
    /// `⌈(ε/2)·n⌉` points per pass, `n` the number of parties.
    Inputs,
    /// `⌈(ε/2)·|current set|⌉` points per pass.
    #[default]
    Survivors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CronusConfig {
    pub mode: FilterMode,
    /// Stop filtering a sample once the top eigenvalue is at most
    /// `eigen_threshold`.
    pub early_exit: bool,
    pub eigen_threshold: f64,
    /// Passes in practical mode.
    pub passes: usize,
    pub removal_base: RemovalBase,
}

impl Default for CronusConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Practical,
            early_exit: true,
            eigen_threshold: 9.0,
            passes: 2,
            removal_base: RemovalBase::Survivors,
        }
    }
}

/// Per-sample filter telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleFilter {
    /// Filtering passes that removed at least one point.
    pub passes: usize,
    pub removed: usize,
    /// The filter would have removed every point; the last non-empty set's
    /// mean was returned instead.
    pub emptied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CronusOutput {
    pub aggregate: Matrix,
    pub samples: Vec<SampleFilter>,
}

impl CronusOutput {
    pub fn flagged(&self) -> usize {
        self.samples.iter().filter(|s| s.emptied).count()
    }
}

fn subset_mean(points: &[&[f64]], keep: &[usize]) -> RealVector {
    let rows: Vec<&[f64]> = keep.iter().map(|&i| points[i]).collect();
    numerics::mean_vec(&rows, None).expect("non-empty subset of equal-length rows")
}

/// Mean, top eigenpair and absolute projections of the points in `keep`.
fn spectral_step(points: &[&[f64]], keep: &[usize]) -> (RealVector, f64, Vec<f64>) {
    let rows: Vec<&[f64]> = keep.iter().map(|&i| points[i]).collect();
    let mean = numerics::mean_vec(&rows, None).expect("non-empty subset of equal-length rows");
    if rows.len() < 2 {
        return (mean, 0.0, vec![0.0; rows.len()]);
    }
    let cov = covariance_about(&rows, &mean);
    let pair = match top_eigenpair(&cov) {
        Ok(p) => p,
        Err(NumericsError::NotConverged { last, .. }) => last,
        Err(e) => unreachable!("covariance is square and symmetric: {e}"),
    };
    let mut centered = vec![0.0; mean.len()];
    let proj = rows
        .iter()
        .map(|r| {
            for ((c, x), m) in centered.iter_mut().zip(r.iter()).zip(&mean) {
                *c = x - m;
            }
            dot(&pair.vector, &centered).abs()
        })
        .collect();
    (mean, pair.value, proj)
}

/// Spectral filtering robust mean of one sample's points.
pub fn robust_mean_filter(
    points: &[&[f64]],
    epsilon: f64,
    cfg: &CronusConfig,
    rng: &mut impl Rng,
) -> (RealVector, SampleFilter) {
    let n = points.len();
    let mut keep: Vec<usize> = (0..n).collect();
    let mut telemetry = SampleFilter::default();
    match cfg.mode {
        FilterMode::Practical => {
            for _ in 0..cfg.passes {
                let (mean, lambda, proj) = spectral_step(points, &keep);
                if cfg.early_exit && lambda <= cfg.eigen_threshold {
                    return (mean, telemetry);
                }
                let base = match cfg.removal_base {
                    RemovalBase::Inputs => n,
                    RemovalBase::Survivors => keep.len(),
                };
                let remove = ceil_count(epsilon / 2.0 * base as f64);
                if remove == 0 {
                    continue;
                }
                if remove >= keep.len() {
                    telemetry.emptied = true;
                    return (mean, telemetry);
                }
                // Largest projection first; ties remove the lower party index.
                let mut order: Vec<usize> = (0..keep.len()).collect();
                order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(keep[a].cmp(&keep[b])));
                let mut drop = vec![false; keep.len()];
                for &pos in &order[..remove] {
                    drop[pos] = true;
                }
                keep = keep
                    .iter()
                    .zip(&drop)
                    .filter(|(_, &d)| !d)
                    .map(|(&i, _)| i)
                    .collect();
                telemetry.passes += 1;
                telemetry.removed += remove;
            }
            (subset_mean(points, &keep), telemetry)
        }
        FilterMode::Randomized => loop {
            let (mean, lambda, proj) = spectral_step(points, &keep);
            if lambda <= cfg.eigen_threshold {
                return (mean, telemetry);
            }
            // Density 2x on [0, 1] by inverse CDF.
            let z = rng.gen::<f64>().sqrt();
            let max = proj.iter().copied().fold(0.0, f64::max);
            let threshold = z * max;
            let next: Vec<usize> = keep
                .iter()
                .zip(&proj)
                .filter(|(_, &p)| p < threshold)
                .map(|(&i, _)| i)
                .collect();
            if next.is_empty() {
                telemetry.emptied = true;
                return (mean, telemetry);
            }
            telemetry.passes += 1;
            telemetry.removed += keep.len() - next.len();
            keep = next;
        },
    }
}

/// Robust aggregation of per-party prediction matrices, one sample (row) at a
/// time. Rows are independent; each randomized row draws from its own seeded
/// stream, so the result does not depend on scheduling.
pub fn agg_cronus(
    predictions: &[Matrix],
    epsilon: f64,
    cfg: &CronusConfig,
    seed: u64,
) -> Result<CronusOutput> {
    if predictions.len() < 2 {
        return Err(AggregationError::TooFewParties {
            rule: "cronus",
            detail: format!("at least 2 parties, got {}", predictions.len()),
        });
    }
    if !(0.0..0.5).contains(&epsilon) {
        return Err(AggregationError::InvalidEpsilon(epsilon));
    }
    let (rows, cols) = (predictions[0].rows(), predictions[0].cols());
    for (party, m) in predictions.iter().enumerate() {
        if m.rows() != rows || m.cols() != cols {
            return Err(AggregationError::ShapeMismatch {
                party,
                rows,
                cols,
                found_rows: m.rows(),
                found_cols: m.cols(),
            });
        }
    }
    let per_row: Vec<(RealVector, SampleFilter)> = (0..rows)
        .into_par_iter()
        .map(|k| {
            let points: Vec<&[f64]> = predictions.iter().map(|m| m.row(k)).collect();
            let mut rng = rng_from_seed(derive_seed(seed, &[k as u64]));
            robust_mean_filter(&points, epsilon, cfg, &mut rng)
        })
        .collect();
    let mut aggregate = Matrix::zeros(rows, cols);
    let mut samples = Vec::with_capacity(rows);
    for (k, (mean, flag)) in per_row.into_iter().enumerate() {
        aggregate.row_mut(k).copy_from_slice(&mean);
        samples.push(flag);
    }
    Ok(CronusOutput { aggregate, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr_free::normal;

    /// Box-Muller without pulling in a distribution crate.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal(rng: &mut impl Rng) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    fn input(updates: &[RealVector], eps: f64) -> AggregationInput<'_> {
        AggregationInput::new(updates, None, eps).unwrap()
    }

    fn scalars(v: &[f64]) -> Vec<RealVector> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn input_validation() {
        assert_eq!(AggregationInput::new(&[], None, 0.0).unwrap_err(), AggregationError::Empty);
        let u = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            AggregationInput::new(&u, None, 0.0),
            Err(AggregationError::Numerics(NumericsError::DimensionMismatch { index: 1, .. }))
        ));
        let u = scalars(&[1.0, 2.0]);
        assert!(AggregationInput::new(&u, Some(&[1]), 0.0).is_err());
        assert!(AggregationInput::new(&u, None, 0.5).is_err());
    }

    #[test]
    fn mean_examples() {
        let u = scalars(&[1.0, 2.0, 3.0]);
        assert_eq!(agg_mean(&AggregationInput::new(&u, Some(&[5, 5, 5]), 0.0).unwrap()).unwrap(), vec![2.0]);
        let u = scalars(&[0.0, 4.0]);
        assert_eq!(agg_mean(&AggregationInput::new(&u, Some(&[3, 1]), 0.0).unwrap()).unwrap(), vec![1.0]);
        let mut u = scalars(&[0.0; 9]);
        u.push(vec![1e9]);
        assert_eq!(agg_mean(&input(&u, 0.0)).unwrap(), vec![1e8]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(agg_median(&input(&scalars(&[1.0, 2.0, 1e9]), 0.0)).unwrap(), vec![2.0]);
        let u = vec![vec![1.0, 5.0], vec![2.0, 4.0], vec![3.0, 3.0]];
        assert_eq!(agg_median(&input(&u, 0.0)).unwrap(), vec![2.0, 4.0]);
        assert_eq!(agg_median(&input(&[vec![7.0, -1.0]], 0.0)).unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn trimmed_mean_examples() {
        // Distances to the median 2 are {1, 0, 1, 98}; keep 2 and then 1 by index.
        assert_eq!(trimmed_mean(&scalars(&[1.0, 2.0, 3.0, 100.0]), 0.25).unwrap(), vec![1.5]);
        let u = vec![vec![1.0, 4.0], vec![2.0, 8.0], vec![6.0, 0.0]];
        assert_eq!(trimmed_mean(&u, 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(trimmed_mean(&scalars(&[4.5; 5]), 0.4).unwrap(), vec![4.5]);
        assert!(trimmed_mean(&scalars(&[1.0]), 0.5).is_err());
    }

    /// Exhaustive Krum oracle: score every update against all others.
    fn krum_oracle(u: &[RealVector], eps: f64) -> usize {
        let n = u.len();
        let k = ((1.0 - eps) * n as f64 - 2.0 + 1e-9).floor() as usize;
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| u[i].iter().zip(&u[j]).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[..k].iter().sum()
            })
            .collect();
        let mut best = 0;
        for i in 1..n {
            if scores[i] < scores[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn krum_examples() {
        // Scores {10, 5, 13, 130}.
        let u = scalars(&[0.0, 1.0, 3.0, 10.0]);
        assert_eq!(agg_krum(&input(&u, 0.0)).unwrap(), (vec![1.0], 1));
        assert_eq!(krum_oracle(&u, 0.0), 1);
        let same = vec![vec![2.0, 2.0]; 5];
        assert_eq!(agg_krum(&input(&same, 0.0)).unwrap().1, 0);
        assert!(matches!(
            agg_krum(&input(&scalars(&[1.0, 2.0]), 0.0)),
            Err(AggregationError::TooFewParties { .. })
        ));
    }

    #[test]
    fn krum_matches_oracle_on_random_instances() {
        let mut rng = rng_from_seed(99);
        for trial in 0..200 {
            let n = rng.gen_range(4..=8);
            let d = rng.gen_range(1..=4);
            let eps = if trial % 2 == 0 { 0.0 } else { 0.125 };
            let u: Vec<RealVector> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
            let (v, idx) = agg_krum(&input(&u, eps)).unwrap();
            assert_eq!(idx, krum_oracle(&u, eps));
            assert_eq!(v, u[idx]);
        }
    }

    #[test]
    fn bulyan_examples() {
        let same = vec![vec![3.0, -1.0]; 6];
        assert_eq!(agg_bulyan(&input(&same, 0.2)).unwrap(), vec![3.0, -1.0]);

        let u = scalars(&[1.0, 2.0, 4.0, 8.0]);
        assert_eq!(agg_bulyan(&input(&u, 0.0)).unwrap(), agg_mean(&input(&u, 0.0)).unwrap());

        let benign = [0.9, 1.1, 1.0, 0.95, 1.05, 1.2, 0.8];
        let mut u = scalars(&benign);
        u.push(vec![1e6]);
        let sel = bulyan_selection(&input(&u, 0.125)).unwrap();
        assert_eq!(sel.len(), 6);
        assert!(!sel.contains(&7));
        let out = agg_bulyan(&input(&u, 0.125)).unwrap()[0];
        assert!((0.8..=1.2).contains(&out), "{out}");
    }

    #[test]
    fn bulyan_stays_inside_selected_envelope() {
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let n = rng.gen_range(7..=12);
            let u: Vec<RealVector> = (0..n).map(|_| (0..3).map(|_| 10.0 * normal(&mut rng)).collect()).collect();
            let inp = input(&u, 0.15);
            let sel = bulyan_selection(&inp).unwrap();
            let out = agg_bulyan(&inp).unwrap();
            for j in 0..3 {
                let lo = sel.iter().map(|&i| u[i][j]).fold(f64::INFINITY, f64::min);
                let hi = sel.iter().map(|&i| u[i][j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn trimmed_mean_without_trim_is_the_mean() {
        let mut rng = rng_from_seed(6);
        for _ in 0..50 {
            let u: Vec<RealVector> = (0..9).map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
            let a = trimmed_mean(&u, 0.0).unwrap();
            let b = agg_mean(&input(&u, 0.0)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mwu_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        for v in [MwuVariant::Avg, MwuVariant::Opt] {
            let out = agg_mwu(&input(&same, 0.0), v, 10).unwrap();
            assert_eq!(out, vec![1.0, 2.0]);
        }

        // Initial mean 1; distances {1, 1, 2}; weights {e^-1, e^-1, e^-2}.
        let u = scalars(&[0.0, 0.0, 3.0]);
        let (w, agg) = mwu_trace(&input(&u, 0.0), MwuVariant::Avg, 1).unwrap();
        let e1 = (-1.0_f64).exp();
        let e2 = (-2.0_f64).exp();
        assert!((w[2] / w[0] - e2 / e1).abs() < 1e-15);
        let expected = 3.0 * e2 / (2.0 * e1 + e2);
        assert!((agg[0] - expected).abs() < 1e-15);
        assert!(agg[0] < 1.0);
        assert!(agg_mwu(&input(&u, 0.0), MwuVariant::Avg, 0).is_err());
    }

    #[test]
    fn mwu_weight_collapse_is_surfaced() {
        let u = scalars(&[0.0, 2000.0]);
        assert_eq!(
            agg_mwu(&input(&u, 0.0), MwuVariant::Avg, 1).unwrap_err(),
            AggregationError::WeightCollapse
        );
    }

    #[test]
    fn mwu_avg_step_penalizes_the_farther_party() {
        let mut rng = rng_from_seed(7);
        for _ in 0..100 {
            let u: Vec<RealVector> = (0..6).map(|_| (0..3).map(|_| normal(&mut rng)).collect()).collect();
            let inp = input(&u, 0.0);
            let start = agg_mean(&inp).unwrap();
            let d: Vec<f64> = u.iter().map(|x| l2_distance(&start, x).unwrap()).collect();
            let (w, _) = mwu_trace(&inp, MwuVariant::Avg, 1).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    if d[i] > d[j] {
                        assert!(w[i] / w[j] < 1.0);
                    }
                }
            }
        }
    }

    fn cronus_fixture(seed: u64) -> (Vec<Matrix>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut benign = Vec::new();
        let mut mats = Vec::new();
        for p in 0..10 {
            let row = if p < 8 {
                let r = vec![1.0 + 0.01 * normal(&mut rng), 0.01 * normal(&mut rng), 0.01 * normal(&mut rng)];
                benign.push(r.clone());
                r
            } else {
                vec![0.0, 0.0, 1.0]
            };
            mats.push(Matrix::from_rows(&[row]).unwrap());
        }
        let target = numerics::mean_vec(&benign, None).unwrap();
        (mats, target)
    }

    #[test]
    fn cronus_agreement_is_a_fixed_point() {
        let m = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let out = agg_cronus(&vec![m.clone(); 5], 0.2, &CronusConfig::default(), 0).unwrap();
        assert_eq!(out.aggregate, m);
        assert_eq!(out.flagged(), 0);
    }

    #[test]
    fn cronus_removes_planted_rows() {
        // Without the eigenvalue exit these probability-scale points would
        // never be filtered, so disable it here.
        let cfg = CronusConfig {
            early_exit: false,
            ..CronusConfig::default()
        };
        for base in [RemovalBase::Inputs, RemovalBase::Survivors] {
            let (mats, target) = cronus_fixture(3);
            let cfg = CronusConfig { removal_base: base, ..cfg.clone() };
            let out = agg_cronus(&mats, 0.2, &cfg, 0).unwrap();
            assert_eq!(out.samples[0].removed, 2);
            let err = l2_distance(out.aggregate.row(0), &target).unwrap();
            assert!(err < 0.05, "{err}");
        }
    }

    #[test]
    fn cronus_eigen_threshold_is_nine() {
        assert_eq!(CronusConfig::default().eigen_threshold, 9.0);
        // Spread large enough to exceed the threshold triggers filtering.
        let mut mats: Vec<Matrix> = (0..8).map(|_| Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap()).collect();
        mats.push(Matrix::from_rows(&[vec![100.0, 0.0]]).unwrap());
        mats.push(Matrix::from_rows(&[vec![100.0, 0.0]]).unwrap());
        let out = agg_cronus(&mats, 0.2, &CronusConfig::default(), 0).unwrap();
        assert_eq!(out.aggregate.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn cronus_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 3);
        assert!(matches!(
            agg_cronus(&[a.clone(), b], 0.1, &CronusConfig::default(), 0),
            Err(AggregationError::ShapeMismatch { party: 1, .. })
        ));
        assert!(agg_cronus(&[a], 0.1, &CronusConfig::default(), 0).is_err());
    }

    #[test]
    fn cronus_flags_emptied_samples() {
        let mats: Vec<Matrix> = [0.0, 100.0, 200.0]
            .iter()
            .map(|&x| Matrix::from_rows(&[vec![x]]).unwrap())
            .collect();
        let cfg = CronusConfig {
            passes: 5,
            early_exit: false,
            ..CronusConfig::default()
        };
        let out = agg_cronus(&mats, 0.45, &cfg, 0).unwrap();
        assert_eq!(out.flagged(), 1);
    }

    #[test]
    fn randomized_mode_is_seed_deterministic() {
        let mut rng = rng_from_seed(8);
        let mats: Vec<Matrix> = (0..20)
            .map(|p| {
                let shift = if p < 4 { 60.0 } else { 0.0 };
                let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| shift + normal(&mut rng)).collect()).collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        let cfg = CronusConfig {
            mode: FilterMode::Randomized,
            ..CronusConfig::default()
        };
        let a = agg_cronus(&mats, 0.2, &cfg, 42).unwrap();
        let b = agg_cronus(&mats, 0.2, &cfg, 42).unwrap();
        assert_eq!(a, b);
        // A small draw of Z can empty the set in one pass; those rows are
        // flagged and fall back to the unfiltered mean.
        for k in (0..6).filter(|&k| !a.samples[k].emptied) {
            assert!(a.aggregate.row(k).iter().all(|x| x.abs() < 5.0));
        }
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for k in AggregatorKind::ALL {
            assert_eq!(AggregatorKind::parse(k.name()), Some(k));
        }
        assert_eq!(
            AggregatorKind::Cronus.aggregate(&input(&scalars(&[1.0]), 0.0), 10).unwrap_err(),
            AggregationError::NotAVectorRule
        );
    }
}
