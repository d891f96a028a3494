//! Restricted-likelihood evaluation for the factored observation model.
//!
//! With `B = -G^{-1} Q`, the transformed observations
//! `nu = (Y - B Z, Z)` are independent Gaussians:
//! `Y - B Z | X ~ N(X beta - B X_(-z) gamma, V)` with `V = G^{-1} + R^{-1}`,
//! and `Z ~ N(X_(-z) gamma, A)` with `A^{-1} = H - Q' G^{-1} Q`. The
//! restricted likelihood of the error contrasts is
//! `-1/2 [ log|M| + log|C' M^{-1} C| + (nu - C theta)' M^{-1} (nu - C theta) ]`
//! at `theta = (C' M^{-1} C)^{-1} C' M^{-1} nu`, where `M = blockdiag(V, A)`
//! and `C = [[X, G^{-1} Q X_(-z)], [0, X_(-z)]]`.
//!
//! Everything here is dense; desk-scale fits (n in the hundreds) are
//! tractable without sparse factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::linear::{Dataset, VarianceParams};

pub(crate) struct RemlContext {
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    /// Outcome design (intercept, z, covariates); for semiparametric fits the
    /// unpenalized columns (polynomial basis and covariates).
    pub x: DMatrix<f64>,
    /// Exposure design; may have zero columns for a known-zero exposure mean.
    pub xz: DMatrix<f64>,
    /// Radial-basis knot columns of a penalized spline, when present.
    pub l_mat: Option<DMatrix<f64>>,
    ll_outer: Option<DMatrix<f64>>,
    deg: DVector<f64>,
    adj: DMatrix<f64>,
}

struct Assembled {
    g_inv: DMatrix<f64>,
    /// Marginal precision of Z: `H - Q' G^{-1} Q`.
    ainv: DMatrix<f64>,
    chol_v: Cholesky<f64, Dyn>,
    q: DVector<f64>,
    logdet_v: f64,
    logdet_ainv: f64,
}

/// Output of the joint (optionally penalized) coefficient solve.
pub(crate) struct SystemOut {
    pub log_rl: f64,
    pub theta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// Wald covariance of the stacked `(theta, gamma)` coefficients.
    pub cov: DMatrix<f64>,
}

fn logdet_of(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

impl RemlContext {
    pub fn for_dataset(data: &Dataset, graph: &AdjacencyGraph) -> Result<Self> {
        Self::with_designs(
            data.y.clone(),
            data.z.clone(),
            data.outcome_design(),
            data.x_minus_z.clone(),
            graph,
        )
    }

    pub fn with_designs(
        y: DVector<f64>,
        z: DVector<f64>,
        x: DMatrix<f64>,
        xz: DMatrix<f64>,
        graph: &AdjacencyGraph,
    ) -> Result<Self> {
        let n = graph.n();
        if y.len() != n || z.len() != n || x.nrows() != n || (xz.ncols() > 0 && xz.nrows() != n) {
            return Err(Error::DimensionMismatch(format!(
                "graph n={n} vs y={}, z={}, x rows={}",
                y.len(),
                z.len(),
                x.nrows()
            )));
        }
        let mut adj = DMatrix::zeros(n, n);
        for (i, j) in graph.edges() {
            adj[(i, j)] = 1.0;
            adj[(j, i)] = 1.0;
        }
        let deg = DVector::from_vec(graph.degrees());
        Ok(Self { y, z, x, xz, l_mat: None, ll_outer: None, deg, adj })
    }

    /// Attaches penalized spline knot columns; their contribution
    /// `psi^{-1} L L'` enters the outcome variance.
    pub fn with_spline(mut self, l: DMatrix<f64>) -> Self {
        self.ll_outer = Some(&l * l.transpose());
        self.l_mat = Some(l);
        self
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn car_dense(&self, tau: f64, phi: f64) -> DMatrix<f64> {
        let n = self.n();
        let mut m = &self.adj * (-tau * phi);
        for i in 0..n {
            m[(i, i)] = tau * self.deg[i];
        }
        m
    }

    fn assemble(&self, v: &VarianceParams, psi_inv: f64) -> Option<Assembled> {
        if !(v.tau_u > 0.0 && v.tau_z > 0.0 && v.tau_eps > 0.0)
            || v.phi_u.abs() >= 1.0
            || v.phi_z.abs() >= 1.0
            || v.rho.abs() >= 1.0
            || psi_inv < 0.0
        {
            return None;
        }
        let n = self.n();
        let g = self.car_dense(v.tau_u, v.phi_u);
        let chol_g = g.cholesky()?;
        let g_inv = chol_g.inverse();
        let qc = -v.rho * (v.tau_u * v.tau_z).sqrt();
        let q = DVector::from_fn(n, |i, _| qc * self.deg[i]);

        let mut ainv = self.car_dense(v.tau_z, v.phi_z);
        for i in 0..n {
            for j in 0..n {
                ainv[(i, j)] -= q[i] * g_inv[(i, j)] * q[j];
            }
        }
        let chol_ainv = ainv.clone().cholesky()?;
        let logdet_ainv = logdet_of(&chol_ainv);

        let mut vmat = g_inv.clone();
        let noise = 1.0 / v.tau_eps;
        for i in 0..n {
            vmat[(i, i)] += noise;
        }
        if psi_inv > 0.0 {
            if let Some(ll) = &self.ll_outer {
                vmat += ll * psi_inv;
            }
        }
        let chol_v = vmat.cholesky()?;
        let logdet_v = logdet_of(&chol_v);

        Some(Assembled { g_inv, ainv, chol_v, q, logdet_v, logdet_ainv })
    }

    /// `G^{-1} Q m` for a matrix `m` (diagonal scaling then dense multiply).
    fn apply_k(&self, a: &Assembled, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut scaled = m.clone();
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= a.q[i];
            }
        }
        &a.g_inv * scaled
    }

    fn apply_k_vec(&self, a: &Assembled, v: &DVector<f64>) -> DVector<f64> {
        let scaled = DVector::from_fn(v.len(), |i, _| a.q[i] * v[i]);
        &a.g_inv * scaled
    }

    /// Restricted log-likelihood; `-inf` outside the PD region.
    pub fn eval(&self, v: &VarianceParams) -> f64 {
        self.eval_psi(v, 0.0)
    }

    /// Restricted log-likelihood with a spline variance contribution
    /// `psi_inv * L L'` added to `Var[Y | X]`.
    pub fn eval_psi(&self, v: &VarianceParams, psi_inv: f64) -> f64 {
        match self.system(v, psi_inv, &self.x, &[]) {
            Some(out) => out.log_rl,
            None => f64::NEG_INFINITY,
        }
    }

    /// Joint error-contrast coefficient estimates `(beta, gamma)` at fixed
    /// variance parameters.
    pub fn joint_coefficients(&self, v: &VarianceParams) -> Result<(DVector<f64>, DVector<f64>)> {
        self.system(v, 0.0, &self.x, &[])
            .map(|out| (out.theta, out.gamma))
            .ok_or_else(|| Error::NotPositiveDefinite(format!("variance params {v:?}")))
    }

    /// Penalized joint solve for a semiparametric fit: design columns
    /// `[polynomial | covariates | knots]` with ridge weights `pen` on the
    /// design block, exposure block included when present. Returns the
    /// coefficient estimates and the Wald covariance of the stacked
    /// `(design, exposure)` coefficients.
    pub fn penalized_joint(
        &self,
        v: &VarianceParams,
        psi_inv: f64,
        design: &DMatrix<f64>,
        pen: &[f64],
    ) -> Result<SystemOut> {
        self.system(v, psi_inv, design, pen)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("variance params {v:?}")))
    }

    fn system(
        &self,
        v: &VarianceParams,
        psi_inv: f64,
        design: &DMatrix<f64>,
        pen: &[f64],
    ) -> Option<SystemOut> {
        let a = self.assemble(v, psi_inv)?;
        let p = design.ncols();
        let q_cols = self.xz.ncols();
        debug_assert!(pen.is_empty() || pen.len() == p);
        let nu1 = &self.y + self.apply_k_vec(&a, &self.z);
        let kxz = self.apply_k(&a, &self.xz);

        let vi_x = a.chol_v.solve(design);
        let vi_kxz = a.chol_v.solve(&kxz);
        let vi_nu1 = a.chol_v.solve(&nu1);

        let dim = p + q_cols;
        let mut info = DMatrix::zeros(dim, dim);
        info.view_mut((0, 0), (p, p)).copy_from(&(design.transpose() * &vi_x));
        for (k, &w) in pen.iter().enumerate() {
            info[(k, k)] += w;
        }
        if q_cols > 0 {
            let a12 = design.transpose() * &vi_kxz;
            info.view_mut((0, p), (p, q_cols)).copy_from(&a12);
            info.view_mut((p, 0), (q_cols, p)).copy_from(&a12.transpose());
            let ainv_xz = &a.ainv * &self.xz;
            let a22 = kxz.transpose() * &vi_kxz + self.xz.transpose() * &ainv_xz;
            info.view_mut((p, p), (q_cols, q_cols)).copy_from(&a22);
        }

        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, p).copy_from(&(design.transpose() * &vi_nu1));
        if q_cols > 0 {
            let r2 = kxz.transpose() * &vi_nu1 + self.xz.transpose() * (&a.ainv * &self.z);
            rhs.rows_mut(p, q_cols).copy_from(&r2);
        }

        let chol_info = info.cholesky()?;
        let logdet_info = logdet_of(&chol_info);
        let stacked = chol_info.solve(&rhs);
        let cov = chol_info.inverse();
        let theta = DVector::from_column_slice(stacked.rows(0, p).as_slice());
        let gamma = DVector::from_column_slice(stacked.rows(p, q_cols).as_slice());

        let mut r1 = &nu1 - design * &theta;
        if q_cols > 0 {
            r1 -= &kxz * &gamma;
        }
        let r2 = if q_cols > 0 { &self.z - &self.xz * &gamma } else { self.z.clone() };
        let quad = r1.dot(&a.chol_v.solve(&r1)) + r2.dot(&(&a.ainv * &r2));

        // Meaningful as a restricted likelihood only for an unpenalized
        // design; penalized callers use the coefficients and covariance.
        let log_rl = -0.5 * (a.logdet_v - a.logdet_ainv + logdet_info + quad);
        Some(SystemOut { log_rl, theta, gamma, cov })
    }

    /// Cholesky of `Var[Y | X] = G^{-1} + tau_eps^{-1} I` (plus the spline
    /// part when `psi_inv > 0`).
    pub fn outcome_variance_cholesky_psi(
        &self,
        v: &VarianceParams,
        psi_inv: f64,
    ) -> Result<Cholesky<f64, Dyn>> {
        let a = self
            .assemble(v, psi_inv)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("variance params {v:?}")))?;
        Ok(a.chol_v)
    }

    pub fn outcome_variance_cholesky(&self, v: &VarianceParams) -> Result<Cholesky<f64, Dyn>> {
        self.outcome_variance_cholesky_psi(v, 0.0)
    }

    /// GLS estimate of the exposure-model coefficients from the marginal law
    /// of `Z`.
    pub fn exposure_gls(&self, v: &VarianceParams) -> Result<DVector<f64>> {
        let q_cols = self.xz.ncols();
        if q_cols == 0 {
            return Ok(DVector::zeros(0));
        }
        let a = self
            .assemble(v, 0.0)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("variance params {v:?}")))?;
        let ainv_xz = &a.ainv * &self.xz;
        let info = self.xz.transpose() * &ainv_xz;
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("exposure design".into()))?;
        Ok(chol.solve(&(self.xz.transpose() * (&a.ainv * &self.z))))
    }

    /// The `rho` direction of the conditional-mean term:
    /// `-G^{-1} Q* z` with `Q*` diagonal `-sqrt(g_ii h_ii)`.
    pub fn rho_direction_column(&self, v: &VarianceParams) -> Result<DVector<f64>> {
        let g = self.car_dense(v.tau_u, v.phi_u);
        let chol_g = g
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("G block".into()))?;
        let scale = (v.tau_u * v.tau_z).sqrt();
        let scaled = DVector::from_fn(self.n(), |i, _| scale * self.deg[i] * self.z[i]);
        Ok(chol_g.solve(&scaled))
    }

    /// Rough starting point from OLS residual scales.
    pub fn data_driven_start(&self) -> Option<VarianceParams> {
        let resid_var = |design: &DMatrix<f64>, yv: &DVector<f64>| -> Option<f64> {
            if design.ncols() == 0 {
                let n = yv.len() as f64;
                return Some(yv.dot(yv) / n);
            }
            let xtx = design.transpose() * design;
            let chol = xtx.cholesky()?;
            let b = chol.solve(&(design.transpose() * yv));
            let r = yv - design * b;
            Some(r.dot(&r) / (yv.len() - design.ncols()) as f64)
        };
        let s2y = resid_var(&self.x, &self.y)?.max(1e-8);
        let s2z = resid_var(&self.xz, &self.z)?.max(1e-8);
        let dbar = self.deg.mean();
        Some(VarianceParams {
            tau_u: 1.0 / (s2y * dbar).max(1e-8),
            phi_u: 0.3,
            tau_z: 1.0 / (s2z * dbar).max(1e-8),
            phi_z: 0.1,
            rho: 0.0,
            tau_eps: 2.0 / s2y,
        })
    }
}

/// Restricted log-likelihood with explicit outcome and exposure designs. An
/// exposure design with zero columns pins the exposure mean at zero, which
/// is the configuration under which the non-spatial likelihood collapses to
/// the two identified combinations `sigma^2` and `phi`.
pub fn restricted_log_likelihood_with_designs(
    y: &DVector<f64>,
    z: &DVector<f64>,
    outcome_design: &DMatrix<f64>,
    exposure_design: &DMatrix<f64>,
    graph: &AdjacencyGraph,
    v: &VarianceParams,
) -> Result<f64> {
    let ctx = RemlContext::with_designs(
        y.clone(),
        z.clone(),
        outcome_design.clone(),
        exposure_design.clone(),
        graph,
    )?;
    Ok(ctx.eval(v))
}
