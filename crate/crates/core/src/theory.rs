//! Synthetic checks for shared-axis recovery, off-axis control, the cone
//! bound and averaged-head sufficiency.
//!
//! Task vectors follow the spiked model `τ_i = a_i v* + ζ_i`. Features come
//! from an exactly linear model `φ(x; Θ) = Θx` with isotropic inputs, so the
//! class-mean gap of task `i` is `Δ_i^RF(Θ) = Θ d_i` and its response map is
//! `H_i(ΔΘ) = ΔΘ d_i` with no remainder.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, Matrix, Projector};
use crate::merge::{self, CoreDecomposition, MergeConfig};
use crate::metrics::{auc_counts, ScoreSet};
use crate::tensor::{Layout, Role, TaskVector};

/// Finite-difference step for validating response maps.
pub const FD_STEP: f64 = 1e-5;
/// Allowed gap between closed-form and finite-difference responses.
pub const FD_TOLERANCE: f64 = 1e-8;

/// Mixes a trial index into a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::ZeroVector(what));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n: usize,
    pub dim: usize,
    pub sigma_a: f64,
    pub sigma_z: f64,
    #[serde(default)]
    pub coef_mean: f64,
    pub vstar_seed: u64,
    pub noise_seed: u64,
    /// Planted axis; drawn from `vstar_seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vstar: Option<Vec<f64>>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n: 8,
            dim: 256,
            sigma_a: 1.0,
            sigma_z: 0.05,
            coef_mean: 0.0,
            vstar_seed: 7,
            noise_seed: 11,
            vstar: None,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two tasks, got {}",
                self.n
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(self.sigma_a > 0.0 && self.sigma_a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_a must be positive, got {}",
                self.sigma_a
            )));
        }
        if !(self.sigma_z >= 0.0 && self.sigma_z.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_z must be nonnegative, got {}",
                self.sigma_z
            )));
        }
        if let Some(v) = &self.vstar {
            if v.len() != self.dim {
                return Err(Error::ShapeMismatch(format!(
                    "vstar has {} entries, dim is {}",
                    v.len(),
                    self.dim
                )));
            }
            if (norm(v) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument("vstar must have unit norm".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_vstar(&self) -> Result<Vec<f64>> {
        match &self.vstar {
            Some(v) => Ok(v.clone()),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.vstar_seed);
                unit(gaussian_vec(&mut rng, self.dim), "vstar draw")
            }
        }
    }
}

/// Draws `τ_i = a_i v* + ζ_i` with `a_i ~ N(coef_mean, σ_a²)` and
/// `ζ_i ~ N(0, σ_z² I)`.
pub fn gen_synthetic_tasks(spec: &SyntheticTaskSpec) -> Result<(Vec<TaskVector>, Vec<f64>)> {
    spec.validate()?;
    let vstar = spec.resolve_vstar()?;
    let layout = merge::flat_layout(spec.dim);
    let coef = Normal::new(spec.coef_mean, spec.sigma_a).expect("sigma_a validated");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let taus = (0..spec.n)
        .map(|i| {
            let a: f64 = coef.sample(&mut rng);
            let values = vstar
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a * v + spec.sigma_z * z
                })
                .collect();
            TaskVector::new(values, layout.clone())
                .map(|t| t.with_ids("theta0", format!("task-{i:03}")))
        })
        .collect::<Result<_>>()?;
    Ok((taus, vstar))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub sin_recovery: f64,
    pub gamma: f64,
    pub a_c_norm: f64,
    pub z_c_opnorm: f64,
    /// Holds unless `γ < 1` and `sin_recovery > γ`.
    pub verdict: bool,
}

/// Splits the centered task matrix into its planted part `A_c v*ᵀ` and the
/// orthogonal noise `Z_c`, then compares the recovered axis with `v*`.
pub fn r2_check(taus: &[TaskVector], vstar: &[f64]) -> Result<RecoveryReport> {
    if taus.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two task vectors".into(),
        ));
    }
    if (norm(vstar) - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("vstar must have unit norm".into()));
    }
    let tau_bar = merge::merge_wa(taus)?;
    if tau_bar.dim() != vstar.len() {
        return Err(Error::ShapeMismatch(
            "vstar and task vectors differ in size".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = taus
        .iter()
        .map(|t| {
            t.values()
                .iter()
                .zip(tau_bar.values())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let a_c: Vec<f64> = rows.iter().map(|r| dot(r, vstar)).collect();
    let z_rows: Vec<Vec<f64>> = rows
        .iter()
        .zip(&a_c)
        .map(|(r, a)| r.iter().zip(vstar).map(|(x, v)| x - a * v).collect())
        .collect();
    let a_c_norm = norm(&a_c);
    let z_c_opnorm = linalg::op_norm(&Matrix::from_rows(&z_rows)?)?;
    let gram = linalg::gram_decompose(&rows)?;
    let mean_norm = taus.iter().map(TaskVector::norm).sum::<f64>() / taus.len() as f64;
    if gram.singular_values()[0] <= merge::DEGENERATE_CUTOFF * mean_norm {
        return Err(Error::Degenerate("centered task matrix is zero".into()));
    }
    let v = gram.right_vectors(&rows, 1)?.vectors.remove(0);
    let sin_recovery = linalg::sin_angle(&v, vstar)?;
    let gamma = if a_c_norm > z_c_opnorm {
        z_c_opnorm / (a_c_norm - z_c_opnorm)
    } else {
        f64::INFINITY
    };
    Ok(RecoveryReport {
        sin_recovery,
        gamma,
        a_c_norm,
        z_c_opnorm,
        verdict: !(gamma < 1.0) || sin_recovery <= gamma,
    })
}

/// Independent recovery trials; trial `t` uses seeds derived from `(base, t)`.
pub fn r2_trials(spec: &SyntheticTaskSpec, trials: usize) -> Result<Vec<RecoveryReport>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = SyntheticTaskSpec {
                vstar_seed: derive_seed(spec.vstar_seed, t),
                noise_seed: derive_seed(spec.noise_seed, t),
                ..spec.clone()
            };
            let (taus, vstar) = gen_synthetic_tasks(&s)?;
            r2_check(&taus, &vstar)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearModelConfig {
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Input dimension `p`.
    pub input_dim: usize,
    pub n_tasks: usize,
    /// Norm of the shared input gap direction.
    pub gap_scale: f64,
    /// Size of each task's gap perturbation relative to `gap_scale`.
    pub gap_perturb: f64,
    /// `Θ₀ = base_scale · u₀ g₀ᵀ`.
    pub base_scale: f64,
    /// Isotropic input standard deviation, used only by sampling oracles.
    pub input_std: f64,
    pub seed: u64,
}

impl Default for LinearModelConfig {
    fn default() -> Self {
        LinearModelConfig {
            feature_dim: 8,
            input_dim: 32,
            n_tasks: 8,
            gap_scale: 1.0,
            gap_perturb: 0.1,
            base_scale: 1.0,
            input_std: 1.0,
            seed: 3,
        }
    }
}

/// `φ(x; Θ) = Θx` with `Θ` a `d × p` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeatureModel {
    pub feature_dim: usize,
    pub input_dim: usize,
    pub theta0: Vec<f64>,
    /// Real class mean `m_{i,0}` per task.
    pub real_means: Vec<Vec<f64>>,
    /// Input gap `d_i = m_{i,1} − m_{i,0}` per task.
    pub gaps: Vec<Vec<f64>>,
    pub input_std: f64,
    /// Shared feature axis `u₀`.
    pub feature_axis: Vec<f64>,
    /// Shared input axis `g₀`.
    pub input_axis: Vec<f64>,
}

impl LinearFeatureModel {
    pub fn dim(&self) -> usize {
        self.feature_dim * self.input_dim
    }

    pub fn n_tasks(&self) -> usize {
        self.gaps.len()
    }

    /// Row-major flattening of `u₀ g₀ᵀ`, a unit vector in parameter space.
    pub fn planted_axis(&self) -> Vec<f64> {
        outer(&self.feature_axis, &self.input_axis)
    }

    /// Layout of one `d × p` MLP weight, so rank truncation sees the matrix.
    pub fn layout(&self) -> Arc<Layout> {
        Arc::new(
            Layout::new(vec![(
                "theta".into(),
                vec![self.feature_dim, self.input_dim],
                Role::Mlp,
            )])
            .expect("single entry"),
        )
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector of size {} for a {}x{} model",
                theta.len(),
                self.feature_dim,
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn features(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!("input of size {}", x.len())));
        }
        Ok(theta
            .chunks(self.input_dim)
            .map(|row| dot(row, x))
            .collect())
    }

    /// `H_i(ΔΘ) = ΔΘ d_i`.
    pub fn response(&self, task: usize, dtheta: &[f64]) -> Result<Vec<f64>> {
        self.features(dtheta, &self.gaps[task])
    }
}

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x * y))
        .collect()
}

/// Builds the model and validates each closed-form response map against
/// central differences of `Δ_i^RF` at `Θ₀`, one parameter at a time.
pub fn build_linear_model(cfg: &LinearModelConfig) -> Result<LinearFeatureModel> {
    let (d, p) = (cfg.feature_dim, cfg.input_dim);
    if d < 2 || p < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature and input dims must be >= 2, got {d}x{p}"
        )));
    }
    if cfg.n_tasks == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    if !(cfg.gap_scale.is_finite() && cfg.gap_perturb >= 0.0 && cfg.input_std >= 0.0) {
        return Err(Error::InvalidArgument(
            "gap and noise scales must be finite and nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let feature_axis = unit(gaussian_vec(&mut rng, d), "feature axis")?;
    let input_axis = unit(gaussian_vec(&mut rng, p), "input axis")?;
    let mut real_means = Vec::with_capacity(cfg.n_tasks);
    let mut gaps = Vec::with_capacity(cfg.n_tasks);
    for _ in 0..cfg.n_tasks {
        real_means.push(gaussian_vec(&mut rng, p));
        let xi = gaussian_vec(&mut rng, p);
        let scale = cfg.gap_perturb / (p as f64).sqrt();
        gaps.push(
            input_axis
                .iter()
                .zip(&xi)
                .map(|(g, e)| cfg.gap_scale * (g + scale * e))
                .collect(),
        );
    }
    let theta0 = outer(&feature_axis, &input_axis)
        .into_iter()
        .map(|x| cfg.base_scale * x)
        .collect();
    let model = LinearFeatureModel {
        feature_dim: d,
        input_dim: p,
        theta0,
        real_means,
        gaps,
        input_std: cfg.input_std,
        feature_axis,
        input_axis,
    };
    let err = fd_response_error(&model)?;
    if err > FD_TOLERANCE {
        return Err(Error::Validation(format!(
            "response map differs from finite differences by {err:e}"
        )));
    }
    Ok(model)
}

/// Largest gap between `H_i e_k` and the central difference of `Δ_i^RF`.
pub fn fd_response_error(model: &LinearFeatureModel) -> Result<f64> {
    let dim = model.dim();
    let errs: Vec<f64> = (0..dim)
        .into_par_iter()
        .map(|k| {
            let mut plus = model.theta0.clone();
            let mut minus = model.theta0.clone();
            plus[k] += FD_STEP;
            minus[k] -= FD_STEP;
            let (dp, dm) = (delta_rf(model, &plus)?, delta_rf(model, &minus)?);
            let mut e_k = vec![0.0; dim];
            e_k[k] = 1.0;
            let mut worst = 0.0f64;
            for i in 0..model.n_tasks() {
                let h = model.response(i, &e_k)?;
                for ((a, b), c) in dp[i].iter().zip(&dm[i]).zip(&h) {
                    worst = worst.max(((a - b) / (2.0 * FD_STEP) - c).abs());
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// `Δ_i^RF(Θ) = Θ d_i` for every task.
pub fn delta_rf(model: &LinearFeatureModel, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    model
        .gaps
        .iter()
        .map(|g| model.features(theta, g))
        .collect()
}

/// `‖Δ_i^RF(Θ₀ + Δθ) − Δ_i^RF(Θ₀) − H_i Δθ‖`, maximized over tasks.
pub fn linearization_remainder(model: &LinearFeatureModel, dtheta: &[f64]) -> Result<f64> {
    let shifted: Vec<f64> = model
        .theta0
        .iter()
        .zip(dtheta)
        .map(|(a, b)| a + b)
        .collect();
    let at_shift = delta_rf(model, &shifted)?;
    let at_base = delta_rf(model, &model.theta0)?;
    let mut worst = 0.0f64;
    for i in 0..model.n_tasks() {
        let h = model.response(i, dtheta)?;
        let r: Vec<f64> = at_shift[i]
            .iter()
            .zip(&at_base[i])
            .zip(&h)
            .map(|((a, b), c)| a - b - c)
            .collect();
        worst = worst.max(norm(&r));
    }
    Ok(worst)
}

/// Draws `n` inputs per class for one task; fakes sit at `m_{i,0} + d_i`.
pub fn sample_task_inputs(
    model: &LinearFeatureModel,
    task: usize,
    n: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m0 = &model.real_means[task];
    let m1: Vec<f64> = m0
        .iter()
        .zip(&model.gaps[task])
        .map(|(a, b)| a + b)
        .collect();
    let mut draw = |mean: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                mean.iter()
                    .map(|m| {
                        m + model.input_std * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let real = draw(m0);
    let fake = draw(&m1);
    (real, fake)
}

/// Shared response direction `u ∝ Σ_i H_i v`, with `v` the recovered core
/// axis (or the core itself when the basis is empty).
pub fn response_direction(
    model: &LinearFeatureModel,
    decomp: &CoreDecomposition,
) -> Result<Vec<f64>> {
    let v = match decomp.basis.basis().first() {
        Some(v) => v.clone(),
        None => decomp.tau_core.values().to_vec(),
    };
    let mut acc = vec![0.0; model.feature_dim];
    for i in 0..model.n_tasks() {
        let h = model.response(i, &v)?;
        // Orient every image along the first one before summing.
        let s = if acc.iter().all(|x| *x == 0.0) || dot(&acc, &h) >= 0.0 {
            1.0
        } else {
            -1.0
        };
        for (a, x) in acc.iter_mut().zip(&h) {
            *a += s * x;
        }
    }
    unit(acc, "response direction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffAxisReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub eps_prime: f64,
    pub kappa_u: f64,
    pub tail_ratio: f64,
    pub verdict: bool,
}

/// Off-axis response of the scaled residual block against the core response.
pub fn r3_check(
    model: &LinearFeatureModel,
    decomp: &CoreDecomposition,
    u: &[f64],
    rank_frac: f64,
) -> Result<OffAxisReport> {
    let pu = Projector::new(model.feature_dim, vec![u.to_vec()])?;
    let scaled_res = decomp.res_merge.scaled(decomp.eta);
    let mut lhs = Vec::with_capacity(model.n_tasks());
    let mut rhs = Vec::with_capacity(model.n_tasks());
    for i in 0..model.n_tasks() {
        let off = linalg::reject(&pu, &model.response(i, scaled_res.values())?)?;
        let r = norm(&model.response(i, decomp.tau_core.values())?);
        if r == 0.0 {
            return Err(Error::Degenerate(format!(
                "core response of task {i} is zero"
            )));
        }
        lhs.push(norm(&off));
        rhs.push(r);
    }
    let eps_prime = lhs.iter().zip(&rhs).map(|(l, r)| l / r).fold(0.0, f64::max);

    let (d, p) = (model.feature_dim, model.input_dim);
    let (mut kappa, mut tail) = (0.0, 0.0);
    for delta in &decomp.residuals {
        let m = Matrix::from_row_major(d, p, delta.values().to_vec())?;
        let fro = m.frobenius_norm();
        if fro == 0.0 {
            continue;
        }
        let mut off_sq = 0.0;
        for c in 0..p {
            let col = m.column(c);
            off_sq += linalg::reject(&pu, &col)?
                .iter()
                .map(|x| x * x)
                .sum::<f64>();
        }
        kappa += off_sq.sqrt() / fro;
        let r = ((rank_frac * d.min(p) as f64).round() as usize).clamp(1, d.min(p));
        tail += linalg::tail_energy(&m, r)? / fro;
    }
    let n = decomp.residuals.len().max(1) as f64;
    Ok(OffAxisReport {
        lhs,
        rhs,
        eps_prime,
        kappa_u: kappa / n,
        tail_ratio: tail / n,
        verdict: eps_prime < 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    /// `max_i ‖P_{u⊥} Δ_i‖ / |⟨Δ_i, u⟩|` at the merged parameters.
    pub cone_eps: f64,
    pub cone_bound: f64,
    pub sines: Vec<f64>,
    pub max_cone_sin: f64,
    pub verdict: bool,
}

/// `ε / (1 − ε)`, infinite once `ε ≥ 1`.
pub fn cone_bound(eps: f64) -> f64 {
    if eps < 1.0 {
        eps / (1.0 - eps)
    } else {
        f64::INFINITY
    }
}

/// Angles between each merged class-mean gap and `u`.
pub fn prop1_check(
    model: &LinearFeatureModel,
    theta_star: &[f64],
    u: &[f64],
) -> Result<ConeReport> {
    let gaps = delta_rf(model, theta_star)?;
    let pu = Projector::new(model.feature_dim, vec![u.to_vec()])?;
    let mut cone_eps = 0.0f64;
    let mut sines = Vec::with_capacity(gaps.len());
    for g in &gaps {
        let on = dot(g, u).abs();
        let off = norm(&linalg::reject(&pu, g)?);
        cone_eps = cone_eps.max(if on > 0.0 { off / on } else { f64::INFINITY });
        sines.push(linalg::sin_angle(g, u)?);
    }
    let max_cone_sin = sines.iter().copied().fold(0.0, f64::max);
    let bound = cone_bound(cone_eps);
    Ok(ConeReport {
        cone_eps,
        cone_bound: bound,
        sines,
        max_cone_sin,
        verdict: cone_eps < 1.0 && max_cone_sin <= bound + 1e-9,
    })
}

/// Specialist heads and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub q: Vec<f64>,
    pub scales: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
}

impl HeadModel {
    /// `w_i = c_i q` exactly.
    pub fn collinear(q: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::EmptyInput("head scales"));
        }
        if scales.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(
                "head scales must be positive".into(),
            ));
        }
        let heads: Vec<Vec<f64>> = scales
            .iter()
            .map(|c| q.iter().map(|x| c * x).collect())
            .collect();
        let averaged = merge::average_head(&heads)?;
        Ok(HeadModel {
            q,
            scales,
            heads,
            averaged,
        })
    }

    /// Collinear heads, each pushed off `q` by a seeded perturbation of
    /// relative size `perturb`.
    pub fn perturbed(q: Vec<f64>, scales: Vec<f64>, perturb: f64, seed: u64) -> Result<Self> {
        let mut m = HeadModel::collinear(q, scales)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qn = norm(&m.q);
        for (h, c) in m.heads.iter_mut().zip(&m.scales) {
            for x in h.iter_mut() {
                *x += perturb * c * qn * rng.random_range(-1.0..1.0);
            }
        }
        m.averaged = merge::average_head(&m.heads)?;
        Ok(m)
    }

    pub fn is_collinear(&self) -> bool {
        self.heads
            .iter()
            .zip(&self.scales)
            .all(|(h, c)| h.iter().zip(&self.q).all(|(w, q)| *w == c * q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    /// Largest `|s̄(x) − (c̄/c_i) s_i(x)|`.
    pub max_score_gap: f64,
    pub auc_specialists: Vec<f64>,
    pub auc_averaged: f64,
    /// AUC equality checked on the exact rational counts.
    pub auc_equal: bool,
    pub verdict: bool,
}

/// Scores every feature with each head and the averaged head.
///
/// `labels` are 1 for fake and 0 for real. In strict mode non-collinear heads
/// are rejected.
pub fn head_sufficiency_check(
    heads: &HeadModel,
    features: &[Vec<f64>],
    labels: &[u8],
    strict: bool,
) -> Result<HeadReport> {
    if strict && !heads.is_collinear() {
        return Err(Error::InvalidArgument(
            "heads are not exact multiples of q".into(),
        ));
    }
    let c_bar = heads.scales.iter().sum::<f64>() / heads.scales.len() as f64;
    let avg_scores: Vec<f64> = features.iter().map(|f| dot(&heads.averaged, f)).collect();
    let avg_set = ScoreSet::from_labeled("averaged", &avg_scores, labels)?;
    let avg_counts = auc_counts(&avg_set)?;
    let mut max_gap = 0.0f64;
    let mut aucs = Vec::with_capacity(heads.heads.len());
    let mut equal = true;
    for (h, c) in heads.heads.iter().zip(&heads.scales) {
        let s: Vec<f64> = features.iter().map(|f| dot(h, f)).collect();
        for (a, b) in avg_scores.iter().zip(&s) {
            max_gap = max_gap.max((a - c_bar / c * b).abs());
        }
        let set = ScoreSet::from_labeled("specialist", &s, labels)?;
        let counts = auc_counts(&set)?;
        equal &= counts == avg_counts;
        aucs.push(counts.0 as f64 / counts.1 as f64);
    }
    let scale = avg_scores.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    Ok(HeadReport {
        max_score_gap: max_gap,
        auc_specialists: aucs,
        auc_averaged: avg_counts.0 as f64 / avg_counts.1 as f64,
        auc_equal: equal,
        verdict: equal && max_gap <= 1e-12 * scale,
    })
}

/// Gaussian feature clouds with labels: `n` real around the origin and `n`
/// fake shifted along `shift`.
pub fn sample_features(shift: &[f64], n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for y in [0u8, 1] {
        for _ in 0..n {
            let f = shift
                .iter()
                .map(|s| {
                    f64::from(y) * s + {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
                })
                .collect();
            feats.push(f);
            labels.push(y);
        }
    }
    (feats, labels)
}

/// Full harness configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub model: LinearModelConfig,
    pub sigma_a: f64,
    pub sigma_z: f64,
    pub coef_mean: f64,
    pub noise_seed: u64,
    pub merge: MergeConfig,
    pub head_scales: Vec<f64>,
    pub head_samples: usize,
    pub head_seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            model: LinearModelConfig::default(),
            sigma_a: 0.5,
            sigma_z: 0.005,
            coef_mean: 1.0,
            noise_seed: 17,
            merge: MergeConfig::default(),
            head_scales: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            head_samples: 200,
            head_seed: 23,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub r2: bool,
    pub r3: bool,
    pub prop1: bool,
    pub head: bool,
}

impl Verdicts {
    pub fn all(&self) -> bool {
        self.r2 && self.r3 && self.prop1 && self.head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub sin_recovery: f64,
    pub gamma: f64,
    pub a_c_norm: f64,
    pub z_c_opnorm: f64,
    pub kappa_u: f64,
    pub tail_ratio: f64,
    pub eps_prime: f64,
    pub cone_eps: f64,
    pub cone_bound: f64,
    pub max_cone_sin: f64,
    pub fd_error: f64,
    pub head_max_score_gap: f64,
    pub verdicts: Verdicts,
}

impl TheoryReport {
    /// Aligned pass/fail table.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "pass" } else { "FAIL" };
        let rows = [
            (
                "recovery",
                format!("sin={:.3e} gamma={:.3e}", self.sin_recovery, self.gamma),
                self.verdicts.r2,
            ),
            (
                "off-axis",
                format!(
                    "eps'={:.3e} kappa_u={:.3e} tail={:.3e}",
                    self.eps_prime, self.kappa_u, self.tail_ratio
                ),
                self.verdicts.r3,
            ),
            (
                "cone",
                format!(
                    "max_sin={:.3e} bound={:.3e} eps={:.3e}",
                    self.max_cone_sin, self.cone_bound, self.cone_eps
                ),
                self.verdicts.prop1,
            ),
            (
                "head",
                format!("score_gap={:.3e}", self.head_max_score_gap),
                self.verdicts.head,
            ),
        ];
        let w = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(name, detail, ok)| format!("{name:<9}  {detail:<w$}  {}\n", mark(*ok)))
            .collect()
    }
}

/// Everything the end-to-end harness produced.
#[derive(Debug, Clone)]
pub struct TheoryRun {
    pub model: LinearFeatureModel,
    pub taus: Vec<TaskVector>,
    pub update: TaskVector,
    pub decomp: CoreDecomposition,
    pub u: Vec<f64>,
    pub recovery: RecoveryReport,
    pub off_axis: OffAxisReport,
    pub cone: ConeReport,
    pub head: HeadReport,
    pub report: TheoryReport,
}

/// Plants `v* = vec(u₀ g₀ᵀ)` in the task vectors, merges them with R²M and
/// runs every check on the result.
pub fn run_theory(cfg: &TheoryConfig) -> Result<TheoryRun> {
    let model = build_linear_model(&cfg.model)?;
    let fd_error = fd_response_error(&model)?;
    let spec = SyntheticTaskSpec {
        n: cfg.model.n_tasks,
        dim: model.dim(),
        sigma_a: cfg.sigma_a,
        sigma_z: cfg.sigma_z,
        coef_mean: cfg.coef_mean,
        vstar_seed: 0,
        noise_seed: cfg.noise_seed,
        vstar: Some(model.planted_axis()),
    };
    let (flat, vstar) = gen_synthetic_tasks(&spec)?;
    let layout = model.layout();
    let taus: Vec<TaskVector> = flat
        .into_iter()
        .map(|t| {
            let ids = (t.base_id.clone(), t.specialist_id.clone());
            TaskVector::new(t.into_values(), layout.clone()).map(|t| t.with_ids(ids.0, ids.1))
        })
        .collect::<Result<_>>()?;
    let recovery = r2_check(&taus, &vstar)?;
    let merge_cfg = MergeConfig {
        method: merge::Method::R2m,
        ..cfg.merge.clone()
    };
    let (update, decomp) = merge::r2m_merge(&taus, &merge_cfg)?;
    let u = response_direction(&model, &decomp)?;
    let off_axis = r3_check(&model, &decomp, &u, merge_cfg.rank_frac)?;
    let theta_star: Vec<f64> = model
        .theta0
        .iter()
        .zip(update.values())
        .map(|(a, b)| a + b)
        .collect();
    let cone = prop1_check(&model, &theta_star, &u)?;

    let heads = HeadModel::collinear(u.clone(), cfg.head_scales.clone())?;
    let shift: Vec<f64> = u.iter().map(|x| 1.5 * x).collect();
    let (features, labels) = sample_features(&shift, cfg.head_samples, cfg.head_seed);
    let head = head_sufficiency_check(&heads, &features, &labels, true)?;

    let report = TheoryReport {
        sin_recovery: recovery.sin_recovery,
        gamma: recovery.gamma,
        a_c_norm: recovery.a_c_norm,
        z_c_opnorm: recovery.z_c_opnorm,
        kappa_u: off_axis.kappa_u,
        tail_ratio: off_axis.tail_ratio,
        eps_prime: off_axis.eps_prime,
        cone_eps: cone.cone_eps,
        cone_bound: cone.cone_bound,
        max_cone_sin: cone.max_cone_sin,
        fd_error,
        head_max_score_gap: head.max_score_gap,
        verdicts: Verdicts {
            r2: recovery.verdict,
            r3: off_axis.verdict,
            prop1: cone.verdict,
            head: head.verdict,
        },
    };
    Ok(TheoryRun {
        model,
        taus,
        update,
        decomp,
        u,
        recovery,
        off_axis,
        cone,
        head,
        report,
    })
}
