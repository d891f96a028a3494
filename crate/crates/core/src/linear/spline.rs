//! Radial-basis penalized splines for semiparametric exposure-response
//! curves: `f(z) = sum_a beta_a z^a + sum_k l_k |z - xi_k|^A` with a ridge
//! penalty `psi` on the knot coefficients, treated as a variance component.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linear::{
    reml, Dataset, EstimatorTag, FitDiagnostics, FitResult, RemlOptions, VarianceParams,
};
use crate::optim;
use crate::stats;

/// Roughness penalty: estimated as a variance component inside the
/// restricted likelihood, or fixed by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Roughness {
    Estimated,
    Fixed(f64),
}

/// Spline specification: basis degree, knot locations, roughness handling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub roughness: Roughness,
}

impl SplineSpec {
    /// Cubic spline with `k` knots at empirical quantiles of `z`.
    pub fn cubic_with_quantile_knots(z: &[f64], k: usize) -> Self {
        Self { degree: 3, knots: quantile_knots(z, k), roughness: Roughness::Estimated }
    }

    /// Default knot count `min(floor(n/4), 20)`.
    pub fn default_knot_count(n: usize) -> usize {
        (n / 4).min(20)
    }

    pub fn validate(&self, z: &DVector<f64>) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::InvalidConfig("spline degree must be >= 1".into()));
        }
        if self.knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("knots must be strictly increasing".into()));
        }
        let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
        if self.knots.iter().any(|&k| k < lo || k > hi) {
            return Err(Error::InvalidConfig(
                "knots must lie within the observed exposure range".into(),
            ));
        }
        if let Roughness::Fixed(p) = self.roughness {
            if !(p > 0.0) {
                return Err(Error::InvalidConfig("fixed roughness must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Interior empirical quantile knots at probabilities `j / (k + 1)`.
pub fn quantile_knots(z: &[f64], k: usize) -> Vec<f64> {
    let mut s = z.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut knots: Vec<f64> =
        (1..=k).map(|j| stats::quantile(&s, j as f64 / (k + 1) as f64)).collect();
    knots.dedup();
    knots
}

/// Polynomial and radial-basis design blocks:
/// `X_poly` columns `1, z, ..., z^A`; `L` entries `|z_i - xi_k|^A`.
pub fn spline_design(z: &DVector<f64>, spec: &SplineSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = z.len();
    let a = spec.degree;
    let mut x_poly = DMatrix::zeros(n, a + 1);
    for i in 0..n {
        let mut pow = 1.0;
        for j in 0..=a {
            x_poly[(i, j)] = pow;
            pow *= z[i];
        }
    }
    let k = spec.knots.len();
    let mut l = DMatrix::zeros(n, k);
    for i in 0..n {
        for (j, &knot) in spec.knots.iter().enumerate() {
            l[(i, j)] = (z[i] - knot).abs().powi(a as i32);
        }
    }
    (x_poly, l)
}

/// Fitted exposure-response curve, evaluable anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineCurve {
    pub degree: usize,
    pub knots: Vec<f64>,
    /// Coefficients of `z, z^2, ..., z^A` (no intercept).
    pub poly: Vec<f64>,
    /// Knot coefficients `l_k`.
    pub weights: Vec<f64>,
}

impl SplineCurve {
    /// `f(z)` without the intercept.
    pub fn eval(&self, z: f64) -> f64 {
        let mut out = 0.0;
        let mut pow = z;
        for &c in &self.poly {
            out += c * pow;
            pow *= z;
        }
        for (w, &knot) in self.weights.iter().zip(&self.knots) {
            out += w * (z - knot).abs().powi(self.degree as i32);
        }
        out
    }

    /// Curve relative to exposure zero; the identified log relative rate.
    pub fn eval_centered(&self, z: f64) -> f64 {
        self.eval(z) - self.eval(0.0)
    }
}

/// A semiparametric fit: coefficient-style results plus the curve and the
/// machinery to put pointwise Wald bands around it.
#[derive(Debug, Clone)]
pub struct SemiparametricFit {
    pub fit: FitResult,
    pub curve: SplineCurve,
    pub psi: f64,
    /// Covariance of the stacked `[poly | covariates | knots]` coefficients.
    pub coef_cov: DMatrix<f64>,
    n_poly: usize,
    n_cov: usize,
}

impl SemiparametricFit {
    /// Pointwise Wald band of the centered curve `f(z) - f(0)`.
    pub fn curve_band(&self, z: f64, level: f64) -> (f64, f64, f64) {
        let g = self.centered_basis(z);
        let var = (&g.transpose() * &self.coef_cov * &g)[(0, 0)].max(0.0);
        let q = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let w = q.inverse_cdf(0.5 + level / 2.0) * var.sqrt();
        let c = self.curve.eval_centered(z);
        (c, c - w, c + w)
    }

    fn centered_basis(&self, z: f64) -> DVector<f64> {
        let dim = self.coef_cov.nrows();
        let mut g = DVector::zeros(dim);
        let a = self.curve.degree;
        let mut pow = z;
        for j in 0..a {
            g[1 + j] = pow; // basis at 0 is 0 for pure powers
            pow *= z;
        }
        for (k, &knot) in self.curve.knots.iter().enumerate() {
            let col = self.n_poly + self.n_cov + k;
            g[col] = (z - knot).abs().powi(a as i32) - knot.abs().powi(a as i32);
        }
        g
    }
}

/// Semiparametric REML fit. `estimator_tag` selects the correction term:
/// GLS tags fix `rho = 0` (spatial variant), affine tags estimate it.
pub fn semiparametric_fit(
    data: &Dataset,
    graph: &AdjacencyGraph,
    spec: &SplineSpec,
    estimator_tag: EstimatorTag,
    opts: &RemlOptions,
) -> Result<SemiparametricFit> {
    spec.validate(&data.z)?;
    let (x_poly, l_mat) = spline_design(&data.z, spec);
    let n_poly = x_poly.ncols();
    let n = data.n();
    let n_cov = data.x_minus_z.ncols() - 1;

    // unpenalized design: polynomial basis then covariates (no duplicate
    // intercept; x_minus_z column 0 is the intercept already in x_poly)
    let mut x_fix = DMatrix::zeros(n, n_poly + n_cov);
    x_fix.view_mut((0, 0), (n, n_poly)).copy_from(&x_poly);
    for j in 0..n_cov {
        x_fix.column_mut(n_poly + j).copy_from(&data.x_minus_z.column(j + 1));
    }

    let fix_rho_zero = matches!(estimator_tag, EstimatorTag::Gls | EstimatorTag::GlsRs | EstimatorTag::Ols);
    let restrict = matches!(estimator_tag, EstimatorTag::GlsRs | EstimatorTag::AffineRs);

    let mut ctx = reml::RemlContext::with_designs(
        data.y.clone(),
        data.z.clone(),
        x_fix.clone(),
        data.x_minus_z.clone(),
        graph,
    )?;
    let k = l_mat.ncols();
    if k > 0 {
        ctx = ctx.with_spline(l_mat.clone());
    }

    // optimize (variance params, optionally log psi)
    let map = SplineParamMap {
        restrict_scales: restrict,
        fix_rho_zero,
        estimate_psi: k > 0 && matches!(spec.roughness, Roughness::Estimated),
    };
    let fixed_psi = match spec.roughness {
        Roughness::Fixed(p) => p,
        Roughness::Estimated => 1.0,
    };
    let kappa = opts.kappa_prior.clone();
    let surrogate = kappa.as_ref().map(|kp| kp.surrogate.build());
    let mut evals = 0usize;
    let mut objective = |t: &[f64]| -> f64 {
        evals += 1;
        let (v, psi) = map.to_params(t, fixed_psi);
        if restrict && v.phi_z > v.phi_u {
            return f64::NEG_INFINITY;
        }
        let psi_inv = if k > 0 { 1.0 / psi } else { 0.0 };
        let mut val = ctx.eval_psi(&v, psi_inv);
        if let (Some(kp), Some(sg)) = (&kappa, &surrogate) {
            if val.is_finite() {
                val += kp.log_density_on(sg, &v.joint_params());
            }
        }
        val
    };

    let mut start = map.from_params(&VarianceParams::mid_range(), fixed_psi);
    let coarse = optim::coordinate_search(&mut objective, &mut start, 2, 1.5);
    if !coarse.is_finite() {
        return Err(Error::Numerical("no feasible start for semiparametric fit".into()));
    }
    let r = optim::nelder_mead(&mut objective, &start, 0.25, 1e-9, opts.max_evals);
    let (v, psi) = map.to_params(&r.x, fixed_psi);
    let psi_inv = if k > 0 { 1.0 / psi } else { 0.0 };

    // penalized joint solve on [x_fix | L]
    let mut t_mat = DMatrix::zeros(n, x_fix.ncols() + k);
    t_mat.view_mut((0, 0), (n, x_fix.ncols())).copy_from(&x_fix);
    if k > 0 {
        t_mat.view_mut((0, x_fix.ncols()), (n, k)).copy_from(&l_mat);
    }
    let mut pen = vec![0.0; t_mat.ncols()];
    for w in pen.iter_mut().skip(x_fix.ncols()) {
        *w = psi;
    }
    let out = ctx.penalized_joint(&v, psi_inv, &t_mat, &pen)?;

    let theta = out.theta;
    let curve = SplineCurve {
        degree: spec.degree,
        knots: spec.knots.clone(),
        poly: (1..n_poly).map(|j| theta[j]).collect(),
        weights: (0..k).map(|j| theta[x_fix.ncols() + j]).collect(),
    };

    let p_t = t_mat.ncols();
    let coef_cov = out.cov.view((0, 0), (p_t, p_t)).into_owned();
    let se = DVector::from_fn(p_t, |i, _| coef_cov[(i, i)].sqrt());
    use statrs::distribution::ContinuousCDF;
    let qn = statrs::distribution::Normal::new(0.0, 1.0)
        .unwrap()
        .inverse_cdf(0.5 + opts.ci_level / 2.0);
    let ci = (0..p_t).map(|i| (theta[i] - qn * se[i], theta[i] + qn * se[i])).collect();

    let fit = FitResult {
        estimator: estimator_tag,
        beta: theta,
        gamma: Some(out.gamma),
        variance: v,
        se,
        ci,
        ci_level: opts.ci_level,
        converged: r.converged,
        diagnostics: FitDiagnostics {
            log_restricted_likelihood: r.fmax,
            evaluations: evals,
            boundary: r.x.iter().any(|c| c.abs() > 12.0),
            message: None,
        },
    };
    Ok(SemiparametricFit { fit, curve, psi, coef_cov, n_poly, n_cov })
}

struct SplineParamMap {
    restrict_scales: bool,
    fix_rho_zero: bool,
    estimate_psi: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SplineParamMap {
    fn to_params(&self, t: &[f64], fixed_psi: f64) -> (VarianceParams, f64) {
        let phi_u = t[1].tanh();
        let phi_z = if self.restrict_scales { phi_u * sigmoid(t[3]) } else { t[3].tanh() };
        let mut idx = 4;
        let rho = if self.fix_rho_zero {
            0.0
        } else {
            let r = t[idx].tanh();
            idx += 1;
            r
        };
        let tau_eps = t[idx].exp();
        idx += 1;
        let psi = if self.estimate_psi { t[idx].exp() } else { fixed_psi };
        (
            VarianceParams { tau_u: t[0].exp(), phi_u, tau_z: t[2].exp(), phi_z, rho, tau_eps },
            psi,
        )
    }

    fn from_params(&self, v: &VarianceParams, psi: f64) -> Vec<f64> {
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
        if self.estimate_psi {
            t.push(psi.ln());
        }
        t
    }
}
