//! OLS, GLS, and affine estimators for Gaussian outcomes.
//!
//! The affine estimator subtracts the identified conditional mean of the
//! latent confounder, `E[U | X] = -G^{-1} Q (Z - X_(-z) gamma)`, from the
//! outcome before the GLS step. Variance parameters are estimated by
//! maximizing the restricted likelihood of the factored observation model;
//! see [`reml`] for the objective.

mod reml;
pub mod spline;

pub use reml::restricted_log_likelihood_with_designs;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::joint::{KappaPriorSpec, SurrogateGraph};
use crate::optim;

/// Column index of the exposure coefficient in the outcome design
/// `[intercept | z | covariates]`.
pub const EXPOSURE_COL: usize = 1;

/// Observed data for one fit. `x_minus_z` is the covariate matrix with the
/// intercept in its first column and no exposure column.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub x_minus_z: DMatrix<f64>,
    /// Log expected counts for count outcomes.
    pub offset: Option<DVector<f64>>,
    /// Entries flagged true carry censored placeholder values.
    pub censor_mask: Option<Vec<bool>>,
    /// Counts below this threshold are censored.
    pub censor_threshold: Option<u64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, z: DVector<f64>, x_minus_z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if z.len() != n || x_minus_z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y={}, z={}, x_minus_z rows={}",
                n,
                z.len(),
                x_minus_z.nrows()
            )));
        }
        let ds = Self { y, z, x_minus_z, offset: None, censor_mask: None, censor_threshold: None };
        let x = ds.outcome_design();
        if rank_deficient(&x) {
            return Err(Error::RankDeficient(
                "[intercept | z | covariates] is not full column rank".into(),
            ));
        }
        Ok(ds)
    }

    pub fn with_offset(mut self, offset: DVector<f64>) -> Result<Self> {
        if offset.len() != self.n() {
            return Err(Error::DimensionMismatch("offset length".into()));
        }
        self.offset = Some(offset);
        Ok(self)
    }

    pub fn with_censoring(mut self, mask: Vec<bool>, threshold: u64) -> Result<Self> {
        if mask.len() != self.n() {
            return Err(Error::DimensionMismatch("censor mask length".into()));
        }
        self.censor_mask = Some(mask);
        self.censor_threshold = Some(threshold);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Outcome design `[intercept | z | covariates]`; the exposure column is
    /// at [`EXPOSURE_COL`].
    pub fn outcome_design(&self) -> DMatrix<f64> {
        let n = self.n();
        let q = self.x_minus_z.ncols();
        let mut x = DMatrix::zeros(n, q + 1);
        x.column_mut(0).copy_from(&self.x_minus_z.column(0));
        x.column_mut(1).copy_from(&self.z);
        for j in 1..q {
            x.column_mut(j + 1).copy_from(&self.x_minus_z.column(j));
        }
        x
    }
}

fn rank_deficient(x: &DMatrix<f64>) -> bool {
    let svd = x.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    svd.singular_values.iter().any(|&s| s < 1e-10 * max.max(1.0))
}

/// Variance parameters of the joint model plus the outcome noise precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub tau_u: f64,
    pub phi_u: f64,
    pub tau_z: f64,
    pub phi_z: f64,
    pub rho: f64,
    pub tau_eps: f64,
}

impl VarianceParams {
    pub fn mid_range() -> Self {
        Self { tau_u: 1.0, phi_u: 0.1, tau_z: 1.0, phi_z: 0.05, rho: 0.0, tau_eps: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    Ols,
    Gls,
    GlsRs,
    Affine,
    AffineRs,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_restricted_likelihood: f64,
    pub evaluations: usize,
    /// Optimum at the edge of the transformed parameter space; variance
    /// components like `1/tau_u` may be collapsing to zero.
    pub boundary: bool,
    pub message: Option<String>,
}

/// Coefficients, variance estimates, and Wald intervals from one fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: EstimatorTag,
    /// Outcome coefficients ordered `[intercept, z, covariates...]`.
    pub beta: DVector<f64>,
    /// Exposure-model coefficients (absent for OLS).
    pub gamma: Option<DVector<f64>>,
    pub variance: VarianceParams,
    pub se: DVector<f64>,
    pub ci: Vec<(f64, f64)>,
    pub ci_level: f64,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn beta_z(&self) -> f64 {
        self.beta[EXPOSURE_COL]
    }

    pub fn ci_z(&self) -> (f64, f64) {
        self.ci[EXPOSURE_COL]
    }
}

/// Options shared by the REML-based fitters.
#[derive(Debug, Clone)]
pub struct RemlOptions {
    pub restrict_scales: bool,
    /// Pin `rho = 0`; with this set the affine fit collapses to GLS.
    pub fix_rho_zero: bool,
    /// Multiply the restricted likelihood by a condition-number prior
    /// evaluated on a small surrogate graph (MAP estimation).
    pub kappa_prior: Option<KappaPriorSpec>,
    pub starts: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub max_evals: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            restrict_scales: false,
            fix_rho_zero: false,
            kappa_prior: None,
            starts: 5,
            seed: 0,
            ci_level: 0.95,
            max_evals: 4000,
        }
    }
}

impl RemlOptions {
    pub fn map_default() -> Self {
        Self {
            kappa_prior: Some(KappaPriorSpec { rate: 0.1, surrogate: SurrogateGraph::Ring4 }),
            ..Self::default()
        }
    }
}

fn normal_quantile(p: f64) -> f64 {
    statrs::distribution::Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

fn wald_ci(beta: &DVector<f64>, se: &DVector<f64>, level: f64) -> Vec<(f64, f64)> {
    let q = normal_quantile(0.5 + level / 2.0);
    beta.iter().zip(se.iter()).map(|(b, s)| (b - q * s, b + q * s)).collect()
}

/// Ordinary least squares with classical standard errors.
pub fn ols_fit(data: &Dataset) -> Result<FitResult> {
    let x = data.outcome_design();
    let (n, p) = (x.nrows(), x.ncols());
    let xtx = x.transpose() * &x;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X'X not invertible".into()))?;
    let beta = chol.solve(&(x.transpose() * &data.y));
    let resid = &data.y - &x * &beta;
    let sigma2 = resid.dot(&resid) / (n - p) as f64;
    let xtx_inv = chol.inverse();
    let se = DVector::from_fn(p, |i, _| (sigma2 * xtx_inv[(i, i)]).sqrt());
    let level = 0.95;
    let ci = wald_ci(&beta, &se, level);
    Ok(FitResult {
        estimator: EstimatorTag::Ols,
        beta,
        gamma: None,
        variance: VarianceParams {
            tau_u: 0.0,
            phi_u: 0.0,
            tau_z: 0.0,
            phi_z: 0.0,
            rho: 0.0,
            tau_eps: 1.0 / sigma2,
        },
        se,
        ci,
        ci_level: level,
        converged: true,
        diagnostics: FitDiagnostics::default(),
    })
}

/// GLS coefficients for a known outcome covariance `Var[Y | X] = v`.
/// With `v = I` this reproduces OLS coefficients exactly.
pub fn gls_with_known_variance(data: &Dataset, v: &DMatrix<f64>) -> Result<FitResult> {
    let x = data.outcome_design();
    let p = x.ncols();
    let vch = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("supplied Var[Y|X]".into()))?;
    let vi_x = vch.solve(&x);
    let info = x.transpose() * &vi_x;
    let ich = info
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X'V^{-1}X not invertible".into()))?;
    let beta = ich.solve(&(vi_x.transpose() * &data.y));
    let cov = ich.inverse();
    let se = DVector::from_fn(p, |i, _| cov[(i, i)].sqrt());
    let level = 0.95;
    let ci = wald_ci(&beta, &se, level);
    Ok(FitResult {
        estimator: EstimatorTag::Gls,
        beta,
        gamma: None,
        variance: VarianceParams::mid_range(),
        se,
        ci,
        ci_level: level,
        converged: true,
        diagnostics: FitDiagnostics::default(),
    })
}

/// Spatial GLS: variance parameters maximize the `rho = 0` restricted
/// likelihood and the coefficients follow the generalized least squares
/// formula with `Var[Y | X] = G^{-1} + tau_eps^{-1} I`. With
/// `restrict_scales` the exposure CAR is fitted jointly under
/// `phi_z <= phi_u`.
pub fn gls_fit(data: &Dataset, graph: &AdjacencyGraph, restrict_scales: bool) -> Result<FitResult> {
    let opts = RemlOptions {
        restrict_scales,
        fix_rho_zero: true,
        ..RemlOptions::default()
    };
    let ctx = reml::RemlContext::for_dataset(data, graph)?;
    let (v, diag, converged) = optimize_variance(&ctx, &opts)?;
    let vch = ctx.outcome_variance_cholesky(&v)?;
    let x = data.outcome_design();
    let vi_x = vch.solve(&x);
    let info = x.transpose() * &vi_x;
    let ich = info
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X'V^{-1}X not invertible".into()))?;
    let beta = ich.solve(&(vi_x.transpose() * &data.y));
    let cov = ich.inverse();
    let se = DVector::from_fn(x.ncols(), |i, _| cov[(i, i)].sqrt());
    let gamma = ctx.exposure_gls(&v)?;
    let ci = wald_ci(&beta, &se, opts.ci_level);
    Ok(FitResult {
        estimator: if restrict_scales { EstimatorTag::GlsRs } else { EstimatorTag::Gls },
        beta,
        gamma: Some(gamma),
        variance: v,
        se,
        ci,
        ci_level: opts.ci_level,
        converged,
        diagnostics: diag,
    })
}

/// Restricted log-likelihood of the factored joint observation model at the
/// given variance parameters; `-inf` outside the positive definite region.
pub fn restricted_log_likelihood(
    v: &VarianceParams,
    data: &Dataset,
    graph: &AdjacencyGraph,
) -> Result<f64> {
    let ctx = reml::RemlContext::for_dataset(data, graph)?;
    Ok(ctx.eval(v))
}

/// The affine estimator: REML (or MAP, with a condition-number prior) over
/// all six variance parameters, coefficients from the joint error-contrast
/// system, standard errors from the `rho`-augmented design.
pub fn affine_fit_reml(
    data: &Dataset,
    graph: &AdjacencyGraph,
    opts: &RemlOptions,
) -> Result<FitResult> {
    let ctx = reml::RemlContext::for_dataset(data, graph)?;
    let n = data.n();
    let p_mean = data.outcome_design().ncols() + data.x_minus_z.ncols();
    if n < p_mean + 6 {
        return Err(Error::InvalidConfig(format!(
            "n = {n} too small for {p_mean} mean and 6 variance parameters"
        )));
    }
    let (v, diag, converged) = optimize_variance(&ctx, opts)?;
    let (beta, gamma) = ctx.joint_coefficients(&v)?;
    let se = affine_se_from_params(&ctx, &v, data)?;
    let ci = wald_ci(&beta, &se, opts.ci_level);
    Ok(FitResult {
        estimator: if opts.restrict_scales { EstimatorTag::AffineRs } else { EstimatorTag::Affine },
        beta,
        gamma: Some(gamma),
        variance: v,
        se,
        ci,
        ci_level: opts.ci_level,
        converged,
        diagnostics: diag,
    })
}

/// Standard errors for a fitted affine estimator via the augmented design
/// `[X | -G^{-1} Q* z]`, which carries the information lost to estimating
/// `rho`.
pub fn affine_standard_errors(
    fit: &FitResult,
    data: &Dataset,
    graph: &AdjacencyGraph,
) -> Result<DVector<f64>> {
    let ctx = reml::RemlContext::for_dataset(data, graph)?;
    affine_se_from_params(&ctx, &fit.variance, data)
}

fn affine_se_from_params(
    ctx: &reml::RemlContext,
    v: &VarianceParams,
    data: &Dataset,
) -> Result<DVector<f64>> {
    let x = data.outcome_design();
    let extra = ctx.rho_direction_column(v)?;
    let vch = ctx.outcome_variance_cholesky(v)?;
    let cov = augmented_wald_covariance(&x, &extra, &vch)?;
    Ok(DVector::from_fn(x.ncols(), |i, _| cov[(i, i)].sqrt()))
}

/// Wald covariance of `(beta, rho)` from the augmented design
/// `D = [X | extra]` and the Cholesky factor of `Var[Y | X]`. Fails when the
/// augmented information matrix is singular (the extra column lies in the
/// column space of `X`).
pub(crate) fn augmented_wald_covariance(
    x: &DMatrix<f64>,
    extra: &DVector<f64>,
    vch: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    let mut d = DMatrix::zeros(n, p + 1);
    d.view_mut((0, 0), (n, p)).copy_from(x);
    d.column_mut(p).copy_from(extra);
    let vi_d = vch.solve(&d);
    let info = d.transpose() * vi_d;
    let chol = info.cholesky().ok_or_else(|| {
        Error::DegenerateSe("augmented design [X | -G^{-1}Q*z] is singular".into())
    })?;
    Ok(chol.inverse())
}

/// Runs the multi-start coordinate + simplex maximization of the restricted
/// likelihood (times the optional prior).
fn optimize_variance(
    ctx: &reml::RemlContext,
    opts: &RemlOptions,
) -> Result<(VarianceParams, FitDiagnostics, bool)> {
    let map = ParamMap { restrict_scales: opts.restrict_scales, fix_rho_zero: opts.fix_rho_zero };
    let kappa = opts.kappa_prior.clone();
    let surrogate = kappa.as_ref().map(|k| k.surrogate.build());
    let mut evals = 0usize;
    let mut objective = |t: &[f64]| -> f64 {
        evals += 1;
        let v = map.to_params(t);
        if opts.restrict_scales && v.phi_z > v.phi_u {
            return f64::NEG_INFINITY;
        }
        let mut val = ctx.eval(&v);
        if let (Some(k), Some(sg)) = (&kappa, &surrogate) {
            if val.is_finite() {
                val += k.log_density_on(sg, &v.joint_params());
            }
        }
        val
    };

    let mut starts: Vec<Vec<f64>> = vec![map.from_params(&VarianceParams::mid_range())];
    if let Some(dd) = ctx.data_driven_start() {
        starts.push(map.from_params(&dd));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    while starts.len() < opts.starts.max(1) {
        let base = map.from_params(&VarianceParams::mid_range());
        let jittered: Vec<f64> =
            base.iter().map(|b| b + rng.random_range(-1.0..1.0)).collect();
        starts.push(jittered);
    }

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in &starts {
        let mut x = start.clone();
        let coarse = optim::coordinate_search(&mut objective, &mut x, 2, 1.5);
        if !coarse.is_finite() {
            continue;
        }
        let r = optim::nelder_mead(&mut objective, &x, 0.25, 1e-10, opts.max_evals);
        if best.as_ref().map_or(true, |b| r.fmax > b.1) {
            best = Some((r.x, r.fmax, r.converged));
        }
    }
    let (t, fmax, converged) =
        best.ok_or_else(|| Error::Numerical("no feasible variance parameters found".into()))?;
    let v = map.to_params(&t);
    let boundary = t.iter().any(|c| c.abs() > 12.0);
    let diag = FitDiagnostics {
        log_restricted_likelihood: fmax,
        evaluations: evals,
        boundary,
        message: if converged { None } else { Some("optimizer did not converge; best point returned".into()) },
    };
    Ok((v, diag, converged))
}

/// Transform between unconstrained optimizer coordinates and the natural
/// variance parameters. Precisions are log-mapped, dependence parameters go
/// through tanh, and under the scale restriction `phi_z = phi_u * sigmoid(s)`
/// keeps `phi_z` strictly inside `[0, phi_u]` for positive `phi_u`.
struct ParamMap {
    restrict_scales: bool,
    fix_rho_zero: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ParamMap {
    fn to_params(&self, t: &[f64]) -> VarianceParams {
        let phi_u = t[1].tanh();
        let phi_z = if self.restrict_scales { phi_u * sigmoid(t[3]) } else { t[3].tanh() };
        let rho = if self.fix_rho_zero { 0.0 } else { t[4].tanh() };
        let tau_eps_idx = if self.fix_rho_zero { 4 } else { 5 };
        VarianceParams {
            tau_u: t[0].exp(),
            phi_u,
            tau_z: t[2].exp(),
            phi_z,
            rho,
            tau_eps: t[tau_eps_idx].exp(),
        }
    }

    fn from_params(&self, v: &VarianceParams) -> Vec<f64> {
        let atanh = |x: f64| 0.5 * ((1.0 + x) / (1.0 - x)).ln();
        let mut t = vec![v.tau_u.ln(), atanh(v.phi_u), v.tau_z.ln()];
        if self.restrict_scales {
            let ratio = (v.phi_z / v.phi_u).clamp(1e-6, 1.0 - 1e-6);
            t.push((ratio / (1.0 - ratio)).ln());
        } else {
            t.push(atanh(v.phi_z));
        }
        if !self.fix_rho_zero {
            t.push(atanh(v.rho));
        }
        t.push(v.tau_eps.ln());
        t
    }
}

impl VarianceParams {
    pub fn joint_params(&self) -> crate::joint::JointParams {
        crate::joint::JointParams {
            g: crate::graph::CarParams { tau: self.tau_u, phi: self.phi_u },
            h: crate::graph::CarParams { tau: self.tau_z, phi: self.phi_z },
            rho: self.rho,
        }
    }
}

#[cfg(test)]
mod tests;
