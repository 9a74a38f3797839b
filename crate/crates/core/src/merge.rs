//! Closed-form merge rules over task vectors.
//!
//! Every rule consumes task vectors `τ_i = θ_i − θ₀` and returns an update
//! `u` so that the merged backbone is `θ₀ + u`. Heads are never merged through
//! the task vector; [`merge_archives`] attaches the averaged specialist head.
//!
//! Specialists are always processed in `specialist_id` order, so results do
//! not depend on the order in which they were passed in.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gram_decompose, Matrix, Projector};
use crate::tensor::{apply_update, task_vectors, LayerSlice, Layout, TaskVector, TensorArchive};

/// Threshold, relative to the mean task-vector norm, below which the centered
/// task matrix counts as zero.
pub const DEGENERATE_CUTOFF: f64 = 1e-12;

pub const R2M_ALPHA_GRID: [f64; 3] = [0.4, 0.5, 0.6];
pub const SCALE_GRID: [f64; 2] = [0.5, 1.0];
pub const FRACTION_GRID: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wa,
    Ta,
    Ties,
    Cart,
    R2m,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wa,
        Method::Ta,
        Method::Ties,
        Method::Cart,
        Method::R2m,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Wa => "wa",
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::Cart => "cart",
            Method::R2m => "r2m",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown merge method {s:?}")))
    }
}

/// How the residual scale η is tied to the Real core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaVariant {
    /// `η = α‖τ_core‖`.
    CoreNorm,
    /// `η = α‖τ_core‖ / (‖τ_res‖ + ε)`: the residual block ends up with norm `α‖τ_core‖`.
    CoreOverResNorm,
}

impl FromStr for EtaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core_norm" | "core-norm" => Ok(EtaVariant::CoreNorm),
            "core_over_res_norm" | "core-over-res-norm" => Ok(EtaVariant::CoreOverResNorm),
            _ => Err(Error::InvalidArgument(format!("unknown eta variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: Method,
    /// R²M residual scale, or the global scale of TA and CART.
    pub alpha: f64,
    /// Per-slice retained rank as a fraction of `min(m, n)`.
    pub rank_frac: f64,
    /// Rank of the Real core.
    pub k: usize,
    /// TIES top-p fraction.
    pub sparsity_p: f64,
    /// Norm-matching guard.
    pub eps: f64,
    pub eta_variant: EtaVariant,
    /// TIES only: use `τ̄ + Σ M_p(τ_i)` instead of the disjoint mean.
    pub average_anchor: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: Method::R2m,
            alpha: 0.5,
            rank_frac: 0.7,
            k: 1,
            sparsity_p: 0.5,
            eps: 1e-12,
            eta_variant: EtaVariant::CoreOverResNorm,
            average_anchor: false,
        }
    }
}

impl MergeConfig {
    pub fn new(method: Method) -> Self {
        MergeConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            ));
        }
        if !(self.rank_frac > 0.0 && self.rank_frac <= 1.0) {
            return bad(format!(
                "rank_frac must lie in (0, 1], got {}",
                self.rank_frac
            ));
        }
        if !(self.sparsity_p > 0.0 && self.sparsity_p <= 1.0) {
            return bad(format!(
                "sparsity_p must lie in (0, 1], got {}",
                self.sparsity_p
            ));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Hyperparameters that lie outside the swept grids for this method.
    pub fn off_grid(&self) -> Vec<String> {
        let on = |v: f64, grid: &[f64]| grid.iter().any(|g| (g - v).abs() < 1e-12);
        let mut out = Vec::new();
        match self.method {
            Method::Wa => {}
            Method::Ta => {
                if !on(self.alpha, &SCALE_GRID) {
                    out.push(format!("alpha={} off grid {SCALE_GRID:?}", self.alpha));
                }
            }
            Method::Ties => {
                if !on(self.sparsity_p, &FRACTION_GRID) {
                    out.push(format!(
                        "sparsity_p={} off grid {FRACTION_GRID:?}",
                        self.sparsity_p
                    ));
                }
            }
            Method::Cart => {
                if !on(self.alpha, &SCALE_GRID) {
                    out.push(format!("alpha={} off grid {SCALE_GRID:?}", self.alpha));
                }
                if !on(self.rank_frac, &FRACTION_GRID) {
                    out.push(format!(
                        "rank_frac={} off grid {FRACTION_GRID:?}",
                        self.rank_frac
                    ));
                }
            }
            Method::R2m => {
                if !on(self.alpha, &R2M_ALPHA_GRID) {
                    out.push(format!("alpha={} off grid {R2M_ALPHA_GRID:?}", self.alpha));
                }
                if !on(self.rank_frac, &FRACTION_GRID) {
                    out.push(format!(
                        "rank_frac={} off grid {FRACTION_GRID:?}",
                        self.rank_frac
                    ));
                }
            }
        }
        out
    }
}

/// Checks compatibility and returns the vectors sorted by specialist id.
fn ordered(taus: &[TaskVector]) -> Result<Vec<&TaskVector>> {
    let first = taus.first().ok_or(Error::EmptyInput("task vector list"))?;
    for t in &taus[1..] {
        first.check_compatible(t)?;
    }
    let mut v: Vec<&TaskVector> = taus.iter().collect();
    v.sort_by(|a, b| a.specialist_id.cmp(&b.specialist_id));
    Ok(v)
}

fn mean_of(vs: &[&TaskVector]) -> TaskVector {
    let d = vs[0].dim();
    let mut acc = vec![0.0; d];
    for t in vs {
        for (a, x) in acc.iter_mut().zip(t.values()) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let mut out = TaskVector::new(acc, vs[0].layout().clone()).expect("same layout");
    out.base_id = vs[0].base_id.clone();
    out
}

fn mean_owned(vs: &[TaskVector]) -> TaskVector {
    mean_of(&vs.iter().collect::<Vec<_>>())
}

/// `(1/N) Σ τ_i`.
pub fn merge_wa(taus: &[TaskVector]) -> Result<TaskVector> {
    Ok(mean_of(&ordered(taus)?))
}

/// `α · (1/N) Σ τ_i`.
pub fn merge_ta(taus: &[TaskVector], alpha: f64) -> Result<TaskVector> {
    Ok(merge_wa(taus)?.scaled(alpha))
}

/// Number of coordinates `⌈p·D⌉` kept by TIES trimming.
fn keep_count(p: f64, d: usize) -> usize {
    if d == 0 {
        return 0;
    }
    // Guard against p·D landing one ulp above an integer.
    let raw = (p * d as f64 * (1.0 - 4.0 * f64::EPSILON)).ceil() as usize;
    raw.clamp(1, d)
}

/// Keeps the `⌈p·D⌉` largest-magnitude coordinates (lower index wins ties).
pub fn ties_trim(tau: &TaskVector, p: f64) -> Result<TaskVector> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p must lie in (0, 1], got {p}"
        )));
    }
    let v = tau.values();
    let keep = keep_count(p, v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &idx[..keep] {
        out[i] = v[i];
    }
    tau.with_values(out)
}

/// Trim, elect a sign per coordinate from the sum of trimmed values, drop
/// disagreeing entries, then average the survivors (disjoint mean).
///
/// With `average_anchor` the result is instead `τ̄ + Σ_i M_p(τ_i)`, where
/// `M_p(τ_i)` is the trimmed, sign-filtered `τ_i`.
pub fn merge_ties(taus: &[TaskVector], p: f64, average_anchor: bool) -> Result<TaskVector> {
    let ordered = ordered(taus)?;
    let trimmed: Vec<TaskVector> = ordered
        .iter()
        .map(|t| ties_trim(t, p))
        .collect::<Result<_>>()?;
    let d = ordered[0].dim();
    let mut elected = vec![0.0f64; d];
    for t in &trimmed {
        for (e, x) in elected.iter_mut().zip(t.values()) {
            *e += x;
        }
    }
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    for t in &trimmed {
        for (k, &x) in t.values().iter().enumerate() {
            if x != 0.0 && elected[k] != 0.0 && x.signum() == elected[k].signum() {
                sum[k] += x;
                count[k] += 1;
            }
        }
    }
    let values = if average_anchor {
        let avg = mean_of(&ordered);
        avg.values().iter().zip(&sum).map(|(a, s)| a + s).collect()
    } else {
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    };
    let mut out = TaskVector::new(values, ordered[0].layout().clone())?;
    out.base_id = ordered[0].base_id.clone();
    Ok(out)
}

/// Absolute rank kept for a slice: `max(1, round(rank_frac · min(m, n)))`.
pub fn retained_rank(slice: &LayerSlice, rank_frac: f64) -> usize {
    let q = slice.min_dim();
    ((rank_frac * q as f64).round() as usize).clamp(1, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRank {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
}

/// Replaces every attention/MLP slice of `delta` by its best rank-r
/// approximation; pass-through tensors are copied unchanged.
pub fn layer_truncate(delta: &TaskVector, rank_frac: f64) -> Result<(TaskVector, Vec<SliceRank>)> {
    let slices = delta.layout().slices();
    let truncated: Vec<(Vec<f64>, SliceRank)> = slices
        .par_iter()
        .map(|s| {
            let r = retained_rank(s, rank_frac);
            let m = Matrix::from_row_major(s.rows, s.cols, delta.slice_values(s).to_vec())?;
            let t = if r == s.min_dim() {
                m
            } else {
                linalg::truncate_rank(&m, r)?
            };
            Ok((
                t.into_vec(),
                SliceRank {
                    name: s.name.clone(),
                    rows: s.rows,
                    cols: s.cols,
                    rank: r,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut values = delta.values().to_vec();
    let mut ranks = Vec::with_capacity(slices.len());
    for (s, (v, r)) in slices.iter().zip(truncated) {
        values[s.range()].copy_from_slice(&v);
        ranks.push(r);
    }
    Ok((delta.with_values(values)?, ranks))
}

/// `τ̄ + η · (1/N) Σ_i LayerTrunc(τ_i − τ̄)`.
pub fn merge_cart(taus: &[TaskVector], eta: f64, rank_frac: f64) -> Result<TaskVector> {
    let ordered = ordered(taus)?;
    if ordered.len() < 2 {
        return Err(Error::InvalidArgument(
            "CART needs at least two specialists".into(),
        ));
    }
    let tau_bar = mean_of(&ordered);
    let residuals: Vec<TaskVector> = ordered
        .par_iter()
        .map(|t| layer_truncate(&t.sub(&tau_bar)?, rank_frac).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    let res_mean = mean_owned(&residuals);
    crate::tensor::vaxpy(eta, &res_mean, &tau_bar)
}

#[derive(Debug, Clone)]
pub struct RealCore {
    pub tau_bar: TaskVector,
    pub tau_core: TaskVector,
    pub basis: Projector,
    /// All singular values of the centered task matrix.
    pub top_values: Vec<f64>,
    /// Set when the centered task matrix is numerically zero.
    pub degenerate: bool,
}

/// Real core: `Π_real τ̄` with `Π_real` the projector onto the top-`k` right
/// singular vectors of the centered task matrix.
pub fn r2m_core(taus: &[TaskVector], k: usize) -> Result<RealCore> {
    let ordered = ordered(taus)?;
    let n = ordered.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "R2M needs at least two specialists".into(),
        ));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            n - 1
        )));
    }
    let tau_bar = mean_of(&ordered);
    let rows: Vec<Vec<f64>> = ordered
        .iter()
        .map(|t| {
            t.values()
                .iter()
                .zip(tau_bar.values())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let gram = gram_decompose(&rows)?;
    let top_values = gram.singular_values();
    let mean_norm = ordered.iter().map(|t| t.norm()).sum::<f64>() / n as f64;
    let d = tau_bar.dim();
    if top_values[0] <= DEGENERATE_CUTOFF * mean_norm {
        return Ok(RealCore {
            tau_core: tau_bar.clone(),
            tau_bar,
            basis: Projector::empty(d),
            top_values,
            degenerate: true,
        });
    }
    let vecs = gram.right_vectors(&rows, k)?;
    let basis = Projector::new(d, vecs.vectors)?;
    let tau_core = tau_bar.with_values(linalg::project(&basis, tau_bar.values())?)?;
    Ok(RealCore {
        tau_bar,
        tau_core,
        basis,
        top_values,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct Residuals {
    /// `δ_i = τ_i − τ̄`.
    pub raw: Vec<TaskVector>,
    /// Layerwise rank-truncated `δ̃_i`.
    pub truncated: Vec<TaskVector>,
    pub ranks: Vec<SliceRank>,
}

/// Centered residuals and their layerwise truncations, in specialist-id order.
pub fn r2m_residuals(
    taus: &[TaskVector],
    tau_bar: &TaskVector,
    rank_frac: f64,
) -> Result<Residuals> {
    let ordered = ordered(taus)?;
    ordered[0].check_compatible(tau_bar)?;
    let pairs: Vec<(TaskVector, TaskVector, Vec<SliceRank>)> = ordered
        .par_iter()
        .map(|t| {
            let raw = t.sub(tau_bar)?;
            let (tr, ranks) = layer_truncate(&raw, rank_frac)?;
            Ok((raw, tr, ranks))
        })
        .collect::<Result<_>>()?;
    let ranks = pairs.first().map(|p| p.2.clone()).unwrap_or_default();
    let (raw, truncated) = pairs.into_iter().map(|(a, b, _)| (a, b)).unzip();
    Ok(Residuals {
        raw,
        truncated,
        ranks,
    })
}

/// Rescales every residual to the mean residual norm:
/// `δ̂_i = m_mean · δ̃_i / (‖δ̃_i‖ + ε)`.
pub fn r2m_norm_match(truncated: &[TaskVector], eps: f64) -> Result<(Vec<TaskVector>, f64)> {
    if truncated.is_empty() {
        return Err(Error::EmptyInput("residual list"));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let norms: Vec<f64> = truncated.iter().map(TaskVector::norm).collect();
    let m_mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let matched = truncated
        .iter()
        .zip(&norms)
        .map(|(t, n)| t.scaled(m_mean / (n + eps)))
        .collect();
    Ok((matched, m_mean))
}

/// Everything R²M computed on the way to its update.
#[derive(Debug, Clone)]
pub struct CoreDecomposition {
    pub tau_bar: TaskVector,
    pub basis: Projector,
    pub top_values: Vec<f64>,
    pub tau_core: TaskVector,
    pub residuals: Vec<TaskVector>,
    pub truncated: Vec<TaskVector>,
    pub matched: Vec<TaskVector>,
    pub m_mean: f64,
    pub res_merge: TaskVector,
    pub eta: f64,
    pub ranks: Vec<SliceRank>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreSummary {
    pub core_norm: f64,
    pub tau_bar_norm: f64,
    pub top_values: Vec<f64>,
    pub m_mean: f64,
    pub res_merge_norm: f64,
    pub eta: f64,
    pub ranks: Vec<SliceRank>,
    pub degenerate: bool,
}

impl CoreDecomposition {
    pub fn summary(&self) -> CoreSummary {
        CoreSummary {
            core_norm: self.tau_core.norm(),
            tau_bar_norm: self.tau_bar.norm(),
            top_values: self.top_values.clone(),
            m_mean: self.m_mean,
            res_merge_norm: self.res_merge.norm(),
            eta: self.eta,
            ranks: self.ranks.clone(),
            degenerate: self.degenerate,
        }
    }
}

/// `τ_core + η · τ_res`, where `τ_res` is the mean of the norm-matched,
/// rank-truncated residuals.
pub fn r2m_merge(
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<(TaskVector, CoreDecomposition)> {
    cfg.validate()?;
    let core = r2m_core(taus, cfg.k)?;
    let mut res = r2m_residuals(taus, &core.tau_bar, cfg.rank_frac)?;
    if core.degenerate {
        let zero = TaskVector::zeros(core.tau_bar.layout().clone());
        res.raw.iter_mut().for_each(|r| *r = zero.clone());
        res.truncated.iter_mut().for_each(|r| *r = zero.clone());
    }
    let (matched, m_mean) = r2m_norm_match(&res.truncated, cfg.eps)?;
    let res_merge = mean_owned(&matched);
    let core_norm = core.tau_core.norm();
    let eta = match cfg.eta_variant {
        EtaVariant::CoreNorm => cfg.alpha * core_norm,
        EtaVariant::CoreOverResNorm => cfg.alpha * core_norm / (res_merge.norm() + cfg.eps),
    };
    let update = crate::tensor::vaxpy(eta, &res_merge, &core.tau_core)?;
    let decomp = CoreDecomposition {
        tau_bar: core.tau_bar,
        basis: core.basis,
        top_values: core.top_values,
        tau_core: core.tau_core,
        residuals: res.raw,
        truncated: res.truncated,
        matched,
        m_mean,
        res_merge,
        eta,
        ranks: res.ranks,
        degenerate: core.degenerate,
    };
    Ok((update, decomp))
}

/// Equal-shape head tensors and their elementwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    pub heads: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
}

impl HeadSet {
    pub fn new(heads: Vec<Vec<f64>>) -> Result<Self> {
        let averaged = average_head(&heads)?;
        Ok(HeadSet { heads, averaged })
    }
}

/// Elementwise mean in list order.
pub fn average_head(heads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = heads.first().ok_or(Error::EmptyInput("head list"))?;
    if heads.iter().any(|h| h.len() != first.len()) {
        return Err(Error::ShapeMismatch("heads have different sizes".into()));
    }
    let mut acc = vec![0.0; first.len()];
    for h in heads {
        for (a, x) in acc.iter_mut().zip(h) {
            *a += x;
        }
    }
    let n = heads.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Averaged head tensors, keyed by tensor name, specialists in id order.
pub fn average_heads(specialists: &[TensorArchive]) -> Result<BTreeMap<String, Vec<f64>>> {
    let first = specialists
        .first()
        .ok_or(Error::EmptyInput("specialist list"))?;
    let mut order: Vec<&TensorArchive> = specialists.iter().collect();
    order.sort_by(|a, b| a.id().cmp(b.id()));
    let mut out = BTreeMap::new();
    for name in first.head_names() {
        let heads: Vec<Vec<f64>> = order
            .iter()
            .map(|s| {
                s.get(name)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::ShapeMismatch(format!("specialist lacks head {name:?}")))
            })
            .collect::<Result<_>>()?;
        out.insert(name.to_string(), average_head(&heads)?);
    }
    Ok(out)
}

/// Dispatches on `cfg.method` over already-computed task vectors.
pub fn merge_update(
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<(TaskVector, Option<CoreDecomposition>)> {
    cfg.validate()?;
    Ok(match cfg.method {
        Method::Wa => (merge_wa(taus)?, None),
        Method::Ta => (merge_ta(taus, cfg.alpha)?, None),
        Method::Ties => (merge_ties(taus, cfg.sparsity_p, cfg.average_anchor)?, None),
        Method::Cart => (merge_cart(taus, cfg.alpha, cfg.rank_frac)?, None),
        Method::R2m => {
            let (u, d) = r2m_merge(taus, cfg)?;
            (u, Some(d))
        }
    })
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub archive: TensorArchive,
    pub update: TaskVector,
    pub decomposition: Option<CoreDecomposition>,
    pub notes: Vec<String>,
}

/// Full archive-level merge: backbone via the configured rule, heads via
/// [`average_heads`].
pub fn merge_archives(
    base: &TensorArchive,
    specialists: &[TensorArchive],
    cfg: &MergeConfig,
) -> Result<MergeOutcome> {
    if specialists.is_empty() {
        return Err(Error::EmptyInput("specialist list"));
    }
    let taus = task_vectors(specialists, base)?;
    let (update, decomposition) = merge_update(&taus, cfg)?;
    let mut archive = apply_update(base, &update)?;
    for (name, avg) in average_heads(specialists)? {
        archive.replace_data(&name, avg)?;
    }
    let mut notes = cfg.off_grid();
    if cfg.method == Method::Ties && cfg.average_anchor {
        notes.push("ties: using the averaged-anchor variant tau_bar + sum M_p(tau_i)".into());
    }
    archive.meta_mut().clear();
    archive.set_id(format!("merged-{}", cfg.method));
    archive
        .meta_mut()
        .insert("merge_config".into(), serde_json::to_string(cfg)?);
    Ok(MergeOutcome {
        archive,
        update,
        decomposition,
        notes,
    })
}

/// Flat layout helper for tests and synthetic experiments.
pub fn flat_layout(dim: usize) -> Arc<Layout> {
    TaskVector::from_flat(vec![0.0; dim]).layout().clone()
}
