//! The Gibbs/Metropolis chain.
//!
//! Proposal scales adapt by Robbins-Monro during burn-in only and freeze
//! afterwards, so retained draws come from a fixed Markov kernel. The
//! coefficient block additionally adapts its proposal covariance to the
//! burn-in sample covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph::{AdjacencyGraph, CarParams};
use crate::joint::{CarFactorBuffer, JointFactorBuffer, JointParams};
use crate::linear::spline::spline_design;
use crate::linear::{Dataset, VarianceParams};

use super::{
    AcceptanceRates, ChainConfig, ExposureTransform, GibbsEstimator, ModelConfig, OutcomeFamily,
    PosteriorSamples, TauPrior,
};

/// Symmetric-proposal Metropolis acceptance: accept with probability
/// `min(1, exp(delta_log_target))`. A zero difference always accepts.
#[inline]
pub fn mh_accept<R: Rng>(rng: &mut R, delta_log_target: f64) -> bool {
    if delta_log_target.is_nan() {
        return false;
    }
    delta_log_target >= 0.0 || rng.random::<f64>() < delta_log_target.exp()
}

fn atanh(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

/// Draws from a Poisson(mu) truncated to `{0, ..., threshold - 1}` by
/// inverse-CDF in log space. When the truncated mass underflows entirely the
/// mode of the truncated distribution is returned with `underflow = true`.
pub fn truncated_poisson_draw<R: Rng>(rng: &mut R, mu: f64, threshold: u64) -> (u64, bool) {
    let k_max = threshold.saturating_sub(1);
    let log_pmf: Vec<f64> =
        (0..=k_max).map(|k| -mu + k as f64 * mu.ln() - ln_gamma(k as f64 + 1.0)).collect();
    let m = log_pmf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (k_max, true);
    }
    let weights: Vec<f64> = log_pmf.iter().map(|lp| (lp - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return (k_max, true);
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if target <= acc {
            return (k as u64, false);
        }
    }
    (k_max, false)
}

struct Structure {
    family: OutcomeFamily,
    estimator: GibbsEstimator,
    has_latent: bool,
    has_joint: bool,
    restrict: bool,
    /// Number of sampled dependence coordinates.
    var_dim: usize,
    likelihood_disabled: bool,
}

struct Chain<'a> {
    cfg: &'a ModelConfig,
    s: Structure,
    n: usize,
    // data
    y: Vec<f64>,
    offset: Vec<f64>,
    t_design: DMatrix<f64>,
    n_coef: usize,
    knot_count: usize,
    xz: DMatrix<f64>,
    z_joint: Vec<f64>,
    censored: Vec<usize>,
    threshold: u64,
    // graph
    degrees: Vec<f64>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    // state
    coef: DVector<f64>,
    gamma: DVector<f64>,
    u: Vec<f64>,
    v: VarianceParams,
    psi: f64,
    mean_fixed: Vec<f64>,
    xz_gamma: Vec<f64>,
    // buffers
    joint_buf: Option<JointFactorBuffer>,
    car_buf: Option<CarFactorBuffer>,
    surrogate: Option<AdjacencyGraph>,
    ttt: DMatrix<f64>,
    // adaptation
    coef_scale: f64,
    coef_chol: DMatrix<f64>,
    coef_history: Vec<Vec<f64>>,
    u_scales: Vec<f64>,
    var_scale: f64,
    adapt_steps_coef: usize,
    adapt_steps_var: usize,
    adapt_steps_u: Vec<usize>,
    // cached
    cur_model_logdet: f64,
    cur_kappa: f64,
    // acceptance counters (post burn-in)
    acc_coef: (u64, u64),
    acc_u: (u64, u64),
    acc_var: (u64, u64),
    underflow_count: u64,
    rng: ChaCha20Rng,
}

/// Runs the sampler. `graph` may be omitted only for the non-spatial
/// estimator.
pub fn run_chain(
    config: &ModelConfig,
    data: &Dataset,
    graph: Option<&AdjacencyGraph>,
) -> Result<PosteriorSamples> {
    let started = std::time::Instant::now();
    let mut chain = Chain::build(config, data, graph)?;
    let cc = &config.chain;
    if cc.burn_in >= cc.iterations {
        return Err(Error::InvalidConfig("burn-in must be smaller than iterations".into()));
    }

    let retained = cc.retained();
    let mut coef_draws = Vec::with_capacity(retained);
    let mut gamma_draws = Vec::with_capacity(if chain.s.has_joint { retained } else { 0 });
    let mut var_draws = Vec::with_capacity(retained);
    let mut psi_draws = Vec::with_capacity(if chain.knot_count > 0 { retained } else { 0 });
    let mut latent_draws = Vec::new();
    let mut imputed_draws = Vec::with_capacity(if chain.censored.is_empty() { 0 } else { retained });

    let mut kept = 0usize;
    for it in 0..cc.iterations {
        let adapting = it < cc.burn_in;
        chain.update_coefficients(adapting);
        if matches!(chain.s.family, OutcomeFamily::Gaussian) {
            chain.update_tau_eps();
        }
        if chain.knot_count > 0 {
            chain.update_psi();
        }
        if chain.s.has_joint {
            chain.update_gamma();
        }
        if chain.s.has_latent {
            chain.update_latent(adapting);
        }
        if chain.s.var_dim > 0 {
            chain.update_variance_block(adapting);
        }
        if !chain.censored.is_empty() && !chain.s.likelihood_disabled {
            chain.impute_censored();
        }

        if it >= cc.burn_in && (it - cc.burn_in) % cc.thinning == 0 {
            // every retained draw satisfies the hard constraints by
            // construction: rejected proposals never enter the state
            debug_assert!(!chain.s.restrict || chain.v.phi_z <= chain.v.phi_u);
            coef_draws.push(chain.coef.iter().cloned().collect::<Vec<_>>());
            if chain.s.has_joint {
                gamma_draws.push(chain.gamma.iter().cloned().collect::<Vec<_>>());
            }
            var_draws.push(chain.v);
            if chain.knot_count > 0 {
                psi_draws.push(chain.psi);
            }
            if cc.store_latent_every > 0 && kept % cc.store_latent_every == 0 && chain.s.has_latent
            {
                latent_draws.push(chain.u.clone());
            }
            if !chain.censored.is_empty() {
                imputed_draws.push(chain.censored.iter().map(|&i| chain.y[i]).collect());
            }
            kept += 1;
        }
    }

    let mut warnings = Vec::new();
    let rate = |(a, t): (u64, u64)| if t == 0 { f64::NAN } else { a as f64 / t as f64 };
    let acceptance = AcceptanceRates {
        coefficients: rate(chain.acc_coef),
        latent: rate(chain.acc_u),
        variance: rate(chain.acc_var),
    };
    for (name, r) in [
        ("coefficients", acceptance.coefficients),
        ("latent", acceptance.latent),
        ("variance", acceptance.variance),
    ] {
        if r.is_finite() && r < 0.01 {
            warnings.push(format!(
                "{name} block acceptance collapsed to {r:.4} after adaptation"
            ));
        }
    }
    if chain.underflow_count > 0 {
        warnings.push(format!(
            "truncated-count imputation underflowed {} times; mode substituted",
            chain.underflow_count
        ));
    }

    Ok(PosteriorSamples {
        coef_names: chain.coef_names(),
        coef: coef_draws,
        gamma: gamma_draws,
        variance: var_draws,
        psi: psi_draws,
        latent_u: latent_draws,
        imputed: imputed_draws,
        censored_sites: chain.censored.clone(),
        acceptance,
        warnings,
        runtime_seconds: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

impl<'a> Chain<'a> {
    fn build(
        config: &'a ModelConfig,
        data: &Dataset,
        graph: Option<&AdjacencyGraph>,
    ) -> Result<Self> {
        let n = data.n();
        let est = config.estimator;
        let s = Structure {
            family: config.outcome_family,
            estimator: est,
            has_latent: est.has_latent(),
            has_joint: est.has_joint(),
            restrict: est.restrict_scales(),
            var_dim: match est {
                GibbsEstimator::Nonspatial => 0,
                GibbsEstimator::Spatial => 2,
                GibbsEstimator::SpatialRs => 4,
                GibbsEstimator::Affine | GibbsEstimator::AffineRs => 5,
            },
            likelihood_disabled: config.likelihood_disabled,
        };

        let graph = match (s.has_latent, graph) {
            (true, Some(g)) => {
                if g.n() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "graph has {} nodes, data has {n}",
                        g.n()
                    )));
                }
                Some(g)
            }
            (true, None) => {
                return Err(Error::InvalidConfig(format!(
                    "estimator {est:?} requires an adjacency graph"
                )))
            }
            (false, g) => g.filter(|g| g.n() == n),
        };

        // outcome family consistency
        let offset = match (config.outcome_family, &data.offset) {
            (OutcomeFamily::PoissonLog, Some(o)) => o.iter().cloned().collect::<Vec<_>>(),
            (OutcomeFamily::PoissonLog, None) => {
                return Err(Error::InvalidConfig(
                    "count outcomes require an offset of log expected counts".into(),
                ))
            }
            (OutcomeFamily::Gaussian, None) => vec![0.0; n],
            (OutcomeFamily::Gaussian, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "offsets are only defined for count outcomes".into(),
                ))
            }
        };
        if matches!(config.outcome_family, OutcomeFamily::Gaussian) && data.censor_mask.is_some() {
            return Err(Error::InvalidConfig(
                "censored-count imputation requires a count outcome".into(),
            ));
        }
        if matches!(config.outcome_family, OutcomeFamily::PoissonLog)
            && data.y.iter().any(|&y| y < 0.0 || y.fract() != 0.0)
        {
            return Err(Error::InvalidData("count outcomes must be nonnegative integers".into()));
        }

        // coefficient design
        let (t_design, knot_count, coef_names) = match &config.spline {
            None => {
                let x = data.outcome_design();
                let mut names = vec!["intercept".to_string(), "z".to_string()];
                for j in 2..x.ncols() {
                    names.push(format!("x{}", j - 1));
                }
                (x, 0usize, names)
            }
            Some(spec) => {
                spec.validate(&data.z)?;
                let (x_poly, l) = spline_design(&data.z, spec);
                let n_cov = data.x_minus_z.ncols() - 1;
                let k = l.ncols();
                let mut t = DMatrix::zeros(n, x_poly.ncols() + n_cov + k);
                t.view_mut((0, 0), (n, x_poly.ncols())).copy_from(&x_poly);
                for j in 0..n_cov {
                    t.column_mut(x_poly.ncols() + j).copy_from(&data.x_minus_z.column(j + 1));
                }
                t.view_mut((0, x_poly.ncols() + n_cov), (n, k)).copy_from(&l);
                let mut names = vec!["intercept".to_string()];
                for a in 1..=spec.degree {
                    names.push(format!("z^{a}"));
                }
                for j in 0..n_cov {
                    names.push(format!("x{}", j + 1));
                }
                for j in 0..k {
                    names.push(format!("knot{}", j + 1));
                }
                (t, k, names)
            }
        };
        let _ = coef_names; // rebuilt on demand
        let n_coef = t_design.ncols();

        // exposure side
        let z_joint: Vec<f64> = match config.exposure_transform_for_joint {
            ExposureTransform::Identity => data.z.iter().cloned().collect(),
            ExposureTransform::Log => {
                if data.z.iter().any(|&z| z <= 0.0) {
                    return Err(Error::InvalidData(
                        "log exposure transform requires strictly positive exposures".into(),
                    ));
                }
                data.z.iter().map(|z| z.ln()).collect()
            }
        };
        let xz = data.x_minus_z.clone();

        let censored: Vec<usize> = data
            .censor_mask
            .as_ref()
            .map(|m| m.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect())
            .unwrap_or_default();
        let threshold = data.censor_threshold.unwrap_or(0);
        if !censored.is_empty() && threshold == 0 {
            return Err(Error::InvalidConfig("censoring mask without a threshold".into()));
        }

        let (degrees, edges, neighbors) = match graph {
            Some(g) => (
                g.degrees(),
                g.edges(),
                (0..n).map(|i| g.neighbors(i).to_vec()).collect::<Vec<_>>(),
            ),
            None => (vec![0.0; n], Vec::new(), vec![Vec::new(); n]),
        };

        let joint_buf = if s.has_joint { graph.map(JointFactorBuffer::new) } else { None };
        let car_buf = if s.has_latent { graph.map(CarFactorBuffer::new) } else { None };
        let surrogate = config.priors.kappa.as_ref().map(|k| k.surrogate.build());

        let mut rng = ChaCha20Rng::seed_from_u64(config.chain.seed);

        // initialization: least squares on a pseudo-response, knots at zero
        let p_unpen = n_coef - knot_count;
        let pseudo: DVector<f64> = match config.outcome_family {
            OutcomeFamily::Gaussian => data.y.clone(),
            OutcomeFamily::PoissonLog => DVector::from_fn(n, |i, _| {
                (data.y[i].max(0.5)).ln() - offset[i]
            }),
        };
        let t_unpen = t_design.view((0, 0), (n, p_unpen)).into_owned();
        let mut ridge = t_unpen.transpose() * &t_unpen;
        for i in 0..p_unpen {
            ridge[(i, i)] += 1e-8;
        }
        let beta0 = ridge
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("coefficient design".into()))?
            .solve(&(t_unpen.transpose() * &pseudo));
        let mut coef = DVector::zeros(n_coef);
        coef.rows_mut(0, p_unpen).copy_from(&beta0);

        let gamma = if s.has_joint {
            let zj = DVector::from_column_slice(&z_joint);
            let mut xtx = xz.transpose() * &xz;
            for i in 0..xz.ncols() {
                xtx[(i, i)] += 1e-8;
            }
            xtx.cholesky()
                .ok_or_else(|| Error::RankDeficient("exposure design".into()))?
                .solve(&(xz.transpose() * &zj))
        } else {
            DVector::zeros(0)
        };

        let v = VarianceParams::mid_range();
        let ttt = t_design.transpose() * &t_design;

        // proposal covariance seeded from the unpenalized information
        let mut info0 = ttt.clone();
        for i in 0..n_coef {
            info0[(i, i)] += 1.0;
        }
        let coef_chol = info0
            .try_inverse()
            .and_then(|m| m.cholesky().map(|c| c.l()))
            .unwrap_or_else(|| DMatrix::identity(n_coef, n_coef) * 0.02);

        let mut chain = Chain {
            cfg: config,
            s,
            n,
            y: data.y.iter().cloned().collect(),
            offset,
            t_design,
            n_coef,
            knot_count,
            xz,
            z_joint,
            censored,
            threshold,
            degrees,
            edges,
            neighbors,
            coef,
            gamma,
            u: vec![0.0; n],
            v,
            psi: 1.0,
            mean_fixed: vec![0.0; n],
            xz_gamma: vec![0.0; n],
            joint_buf,
            car_buf,
            surrogate,
            ttt,
            coef_scale: 2.38 / (n_coef as f64).sqrt(),
            coef_chol,
            coef_history: Vec::new(),
            u_scales: vec![0.5; n],
            var_scale: 0.15,
            adapt_steps_coef: 0,
            adapt_steps_var: 0,
            adapt_steps_u: vec![0; n],
            cur_model_logdet: 0.0,
            cur_kappa: 0.0,
            acc_coef: (0, 0),
            acc_u: (0, 0),
            acc_var: (0, 0),
            underflow_count: 0,
            rng: ChaCha20Rng::seed_from_u64(0),
        };
        std::mem::swap(&mut chain.rng, &mut rng);
        chain.refresh_mean_fixed();
        chain.refresh_xz_gamma();
        chain.cur_model_logdet = chain
            .model_logdet(&chain.v.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("initial dependence parameters".into()))?;
        chain.cur_kappa = chain.kappa_log_prior(&chain.v.clone());
        Ok(chain)
    }

    fn coef_names(&self) -> Vec<String> {
        match &self.cfg.spline {
            None => {
                let mut names = vec!["intercept".to_string(), "z".to_string()];
                for j in 2..self.n_coef {
                    names.push(format!("x{}", j - 1));
                }
                names
            }
            Some(spec) => {
                let mut names = vec!["intercept".to_string()];
                for a in 1..=spec.degree {
                    names.push(format!("z^{a}"));
                }
                let n_cov = self.n_coef - (spec.degree + 1) - self.knot_count;
                for j in 0..n_cov {
                    names.push(format!("x{}", j + 1));
                }
                for j in 0..self.knot_count {
                    names.push(format!("knot{}", j + 1));
                }
                names
            }
        }
    }

    fn refresh_mean_fixed(&mut self) {
        let tm = &self.t_design * &self.coef;
        for i in 0..self.n {
            self.mean_fixed[i] = self.offset[i] + tm[i];
        }
    }

    fn refresh_xz_gamma(&mut self) {
        if self.s.has_joint {
            let m = &self.xz * &self.gamma;
            self.xz_gamma.copy_from_slice(m.as_slice());
        }
    }

    /// Prior precision of each coefficient: knots get `psi`, the rest the
    /// Gaussian coefficient prior.
    fn coef_prior_weight(&self, j: usize) -> f64 {
        if j >= self.n_coef - self.knot_count {
            self.psi
        } else {
            1.0 / (self.cfg.priors.beta_sd * self.cfg.priors.beta_sd)
        }
    }

    fn poisson_loglik_delta(&self, delta_mean: &DVector<f64>) -> f64 {
        let mut d = 0.0;
        for i in 0..self.n {
            let m0 = self.mean_fixed[i] + self.u[i];
            let m1 = m0 + delta_mean[i];
            d += self.y[i] * delta_mean[i] - (m1.exp() - m0.exp());
        }
        d
    }

    fn update_coefficients(&mut self, adapting: bool) {
        match self.s.family {
            OutcomeFamily::PoissonLog => self.update_coefficients_poisson(adapting),
            OutcomeFamily::Gaussian => self.update_coefficients_gaussian(),
        }
    }

    fn update_coefficients_poisson(&mut self, adapting: bool) {
        let p = self.n_coef;
        let xi = DVector::from_fn(p, |_, _| {
            let s: f64 = StandardNormal.sample(&mut self.rng);
            s
        });
        let step = (&self.coef_chol * xi) * self.coef_scale;
        let delta_mean = &self.t_design * &step;

        let mut delta = 0.0;
        if !self.s.likelihood_disabled {
            delta += self.poisson_loglik_delta(&delta_mean);
        }
        for j in 0..p {
            let w = self.coef_prior_weight(j);
            let c0 = self.coef[j];
            let c1 = c0 + step[j];
            delta += -0.5 * w * (c1 * c1 - c0 * c0);
        }

        let accept = mh_accept(&mut self.rng, delta);
        if accept {
            self.coef += &step;
            for i in 0..self.n {
                self.mean_fixed[i] += delta_mean[i];
            }
        }
        if adapting {
            self.adapt_steps_coef += 1;
            let t = self.adapt_steps_coef as f64;
            let target = if p == 1 { 0.44 } else { 0.234 };
            let gain = 1.0 / t.powf(0.6);
            self.coef_scale *= ((if accept { 1.0 } else { 0.0 } - target) * gain).exp();
            self.coef_history.push(self.coef.iter().cloned().collect());
            if self.adapt_steps_coef % 100 == 0 && self.coef_history.len() >= 200 {
                self.refresh_coef_covariance();
            }
        } else {
            self.acc_coef.1 += 1;
            if accept {
                self.acc_coef.0 += 1;
            }
        }
    }

    fn refresh_coef_covariance(&mut self) {
        let hist = &self.coef_history[self.coef_history.len().saturating_sub(1000)..];
        let m = hist.len();
        let p = self.n_coef;
        let mut mean = vec![0.0; p];
        for row in hist {
            for j in 0..p {
                mean[j] += row[j];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        let mut cov = DMatrix::zeros(p, p);
        for row in hist {
            for a in 0..p {
                let da = row[a] - mean[a];
                for b in a..p {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let val = cov[(a, b)] / (m - 1) as f64;
                cov[(a, b)] = val;
                cov[(b, a)] = val;
            }
            cov[(a, a)] += 1e-10;
        }
        if let Some(ch) = cov.cholesky() {
            self.coef_chol = ch.l();
        }
    }

    fn update_coefficients_gaussian(&mut self) {
        let p = self.n_coef;
        let mut info = if self.s.likelihood_disabled {
            DMatrix::zeros(p, p)
        } else {
            &self.ttt * self.v.tau_eps
        };
        for j in 0..p {
            info[(j, j)] += self.coef_prior_weight(j);
        }
        let rhs = if self.s.likelihood_disabled {
            DVector::zeros(p)
        } else {
            let resid = DVector::from_fn(self.n, |i, _| self.y[i] - self.offset[i] - self.u[i]);
            (self.t_design.transpose() * resid) * self.v.tau_eps
        };
        if let Some(ch) = info.cholesky() {
            let mean = ch.solve(&rhs);
            let xi = DVector::from_fn(p, |_, _| {
                let s: f64 = StandardNormal.sample(&mut self.rng);
                s
            });
            let lt = ch.l().transpose();
            let noise = lt
                .solve_upper_triangular(&xi)
                .unwrap_or_else(|| DVector::zeros(p));
            self.coef = mean + noise;
            self.refresh_mean_fixed();
        }
    }

    fn update_tau_eps(&mut self) {
        let (shape0, rate0) = self.cfg.priors.tau_eps.gamma_params().unwrap_or((1.0, 0.0));
        let (shape, rate) = if self.s.likelihood_disabled {
            if self.cfg.priors.tau_eps.gamma_params().is_none() {
                return; // improper flat prior alone: keep current value
            }
            (shape0, rate0)
        } else {
            let mut ss = 0.0;
            for i in 0..self.n {
                let r = self.y[i] - self.mean_fixed[i] - self.u[i];
                ss += r * r;
            }
            (shape0 + self.n as f64 / 2.0, rate0 + ss / 2.0)
        };
        let g = rand_distr::Gamma::new(shape, 1.0 / rate.max(1e-300)).unwrap();
        self.v.tau_eps = g.sample(&mut self.rng).max(1e-12);
    }

    fn update_psi(&mut self) {
        let k = self.knot_count as f64;
        let mut ss = 0.0;
        for j in (self.n_coef - self.knot_count)..self.n_coef {
            ss += self.coef[j] * self.coef[j];
        }
        let shape = self.cfg.priors.psi.shape + k / 2.0;
        let rate = self.cfg.priors.psi.rate + ss / 2.0;
        let g = rand_distr::Gamma::new(shape, 1.0 / rate).unwrap();
        self.psi = g.sample(&mut self.rng).max(1e-12);
    }

    /// H x via neighbor sums: `(H x)_i = tau_z (d_i x_i - phi_z sum_nbr x_j)`.
    fn h_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let mut nbr = 0.0;
            for &j in &self.neighbors[i] {
                nbr += x[j];
            }
            out[i] = self.v.tau_z * (self.degrees[i] * x[i] - self.v.phi_z * nbr);
        }
        out
    }

    fn update_gamma(&mut self) {
        let q = self.xz.ncols();
        let prior_w = 1.0 / (self.cfg.priors.beta_sd * self.cfg.priors.beta_sd);
        let mut info = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        if !self.s.likelihood_disabled {
            // Xz' H Xz and Xz' (H z + Q u)
            let mut h_cols = Vec::with_capacity(q);
            for c in 0..q {
                let col: Vec<f64> = (0..self.n).map(|i| self.xz[(i, c)]).collect();
                h_cols.push(self.h_mul(&col));
            }
            for a in 0..q {
                for b in a..q {
                    let mut s = 0.0;
                    for i in 0..self.n {
                        s += self.xz[(i, a)] * h_cols[b][i];
                    }
                    info[(a, b)] = s;
                    info[(b, a)] = s;
                }
            }
            let hz = self.h_mul(&self.z_joint);
            let qc = -self.v.rho * (self.v.tau_u * self.v.tau_z).sqrt();
            for a in 0..q {
                let mut s = 0.0;
                for i in 0..self.n {
                    s += self.xz[(i, a)] * (hz[i] + qc * self.degrees[i] * self.u[i]);
                }
                rhs[a] = s;
            }
        }
        for a in 0..q {
            info[(a, a)] += prior_w;
        }
        if let Some(ch) = info.cholesky() {
            let mean = ch.solve(&rhs);
            let xi = DVector::from_fn(q, |_, _| {
                let s: f64 = StandardNormal.sample(&mut self.rng);
                s
            });
            let noise = ch
                .l()
                .transpose()
                .solve_upper_triangular(&xi)
                .unwrap_or_else(|| DVector::zeros(q));
            self.gamma = mean + noise;
            self.refresh_xz_gamma();
        }
    }

    fn update_latent(&mut self, adapting: bool) {
        match self.s.family {
            OutcomeFamily::PoissonLog => self.update_latent_poisson(adapting),
            OutcomeFamily::Gaussian => self.update_latent_gaussian(),
        }
    }

    fn update_latent_poisson(&mut self, adapting: bool) {
        let tau_u = self.v.tau_u;
        let phi_u = self.v.phi_u;
        let qc = if self.s.has_joint {
            -self.v.rho * (self.v.tau_u * self.v.tau_z).sqrt()
        } else {
            0.0
        };
        for i in 0..self.n {
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            let du = self.u_scales[i] * noise;
            let u0 = self.u[i];
            let u1 = u0 + du;
            let mut delta = 0.0;
            if !self.s.likelihood_disabled {
                let e = self.mean_fixed[i];
                delta += self.y[i] * du - ((e + u1).exp() - (e + u0).exp());
            }
            let g_ii = tau_u * self.degrees[i];
            let mut nbr = 0.0;
            for &j in &self.neighbors[i] {
                nbr += self.u[j];
            }
            let mut lin = -tau_u * phi_u * nbr;
            if self.s.has_joint {
                lin += qc * self.degrees[i] * (self.z_joint[i] - self.xz_gamma[i]);
            }
            delta += -0.5 * g_ii * (u1 * u1 - u0 * u0) - du * lin;

            let accept = mh_accept(&mut self.rng, delta);
            if accept {
                self.u[i] = u1;
            }
            if adapting {
                self.adapt_steps_u[i] += 1;
                let t = self.adapt_steps_u[i] as f64;
                let gain = 1.0 / t.powf(0.6);
                self.u_scales[i] *= ((if accept { 1.0 } else { 0.0 } - 0.44) * gain).exp();
            } else {
                self.acc_u.1 += 1;
                if accept {
                    self.acc_u.0 += 1;
                }
            }
        }
    }

    fn update_latent_gaussian(&mut self) {
        let buf = self.car_buf.as_mut().expect("latent update requires a graph");
        let shift = if self.s.likelihood_disabled { 0.0 } else { self.v.tau_eps };
        if buf
            .factorize(CarParams { tau: self.v.tau_u, phi: self.v.phi_u }, shift)
            .is_none()
        {
            return; // current parameters are PD, so this cannot happen
        }
        let qc = if self.s.has_joint {
            -self.v.rho * (self.v.tau_u * self.v.tau_z).sqrt()
        } else {
            0.0
        };
        let mut rhs = vec![0.0; self.n];
        for i in 0..self.n {
            if !self.s.likelihood_disabled {
                rhs[i] = self.v.tau_eps * (self.y[i] - self.mean_fixed[i]);
            }
            if self.s.has_joint {
                rhs[i] -= qc * self.degrees[i] * (self.z_joint[i] - self.xz_gamma[i]);
            }
        }
        self.u = buf.sample(&rhs, &mut self.rng);
        self.acc_u = (self.acc_u.0 + 1, self.acc_u.1 + 1);
    }

    /// Sufficient statistics of the current (u, z - Xz gamma) for the
    /// dependence-parameter conditional.
    fn quad_stats(&self) -> QuadStats {
        let mut s = QuadStats::default();
        for i in 0..self.n {
            let rz = if self.s.has_joint { self.z_joint[i] - self.xz_gamma[i] } else { 0.0 };
            s.du2 += self.degrees[i] * self.u[i] * self.u[i];
            s.drz2 += self.degrees[i] * rz * rz;
            s.durz += self.degrees[i] * self.u[i] * rz;
        }
        for &(i, j) in &self.edges {
            s.uu += self.u[i] * self.u[j];
            if self.s.has_joint {
                let ri = self.z_joint[i] - self.xz_gamma[i];
                let rj = self.z_joint[j] - self.xz_gamma[j];
                s.rzrz += ri * rj;
            }
        }
        s
    }

    /// Log-determinant of the model's dependence structure at `v`:
    /// `log|G|` (spatial), `log|G| + log|H|` (restricted, rho = 0), or the
    /// joint `log|P|`. `None` when not positive definite.
    fn model_logdet(&mut self, v: &VarianceParams) -> Option<f64> {
        match self.s.estimator {
            GibbsEstimator::Nonspatial => Some(0.0),
            GibbsEstimator::Spatial => self
                .car_buf
                .as_mut()?
                .factorize(CarParams { tau: v.tau_u, phi: v.phi_u }, 0.0),
            GibbsEstimator::SpatialRs => {
                let buf = self.car_buf.as_mut()?;
                let g = buf.factorize(CarParams { tau: v.tau_u, phi: v.phi_u }, 0.0)?;
                let h = buf.factorize(CarParams { tau: v.tau_z, phi: v.phi_z }, 0.0)?;
                Some(g + h)
            }
            GibbsEstimator::Affine | GibbsEstimator::AffineRs => {
                self.joint_buf.as_mut()?.factorize(&JointParams {
                    g: CarParams { tau: v.tau_u, phi: v.phi_u },
                    h: CarParams { tau: v.tau_z, phi: v.phi_z },
                    rho: v.rho,
                })
            }
        }
    }

    fn kappa_log_prior(&self, v: &VarianceParams) -> f64 {
        if !self.s.has_joint {
            return 0.0;
        }
        match (&self.cfg.priors.kappa, &self.surrogate) {
            (Some(spec), Some(sg)) => spec.log_density_on(sg, &v.joint_params()),
            _ => 0.0,
        }
    }

    /// Parameter priors plus transform Jacobians for the dependence block.
    fn var_prior_term(&self, v: &VarianceParams) -> f64 {
        let pr = &self.cfg.priors;
        let mut lp = pr.tau_u.log_density(v.tau_u) + v.tau_u.ln();
        lp += (1.0 - v.phi_u * v.phi_u).ln();
        if self.s.has_joint {
            lp += pr.tau_z.log_density(v.tau_z) + v.tau_z.ln();
            lp += (1.0 - v.phi_z * v.phi_z).ln();
        }
        if self.s.estimator.rho_free() {
            lp += (1.0 - v.rho * v.rho).ln();
        }
        lp
    }

    fn quad_term(&self, v: &VarianceParams, st: &QuadStats) -> f64 {
        let mut q = v.tau_u * (st.du2 - 2.0 * v.phi_u * st.uu); // u' G u
        if self.s.has_joint {
            q += v.tau_z * (st.drz2 - 2.0 * v.phi_z * st.rzrz); // rz' H rz
            let uqrz = -v.rho * (v.tau_u * v.tau_z).sqrt() * st.durz; // u' Q rz
            q += 2.0 * uqrz;
        }
        q
    }

    fn var_coords(&self, v: &VarianceParams) -> Vec<f64> {
        match self.s.estimator {
            GibbsEstimator::Spatial => vec![v.tau_u.ln(), atanh(v.phi_u)],
            GibbsEstimator::SpatialRs => {
                vec![v.tau_u.ln(), atanh(v.phi_u), v.tau_z.ln(), atanh(v.phi_z)]
            }
            _ => vec![
                v.tau_u.ln(),
                atanh(v.phi_u),
                v.tau_z.ln(),
                atanh(v.phi_z),
                atanh(v.rho),
            ],
        }
    }

    fn var_from_coords(&self, t: &[f64]) -> VarianceParams {
        let mut v = self.v;
        v.tau_u = t[0].exp();
        v.phi_u = t[1].tanh();
        if t.len() >= 4 {
            v.tau_z = t[2].exp();
            v.phi_z = t[3].tanh();
        }
        if t.len() >= 5 {
            v.rho = t[4].tanh();
        } else if matches!(self.s.estimator, GibbsEstimator::SpatialRs) {
            v.rho = 0.0;
        }
        v
    }

    /// One random-walk Metropolis move of the dependence parameters; returns
    /// whether the proposal was accepted. Proposals violating positive
    /// definiteness or the scale restriction are rejected outright.
    pub fn update_variance_block(&mut self, adapting: bool) -> bool {
        let st = self.quad_stats();
        let t0 = self.var_coords(&self.v);
        let t1: Vec<f64> = t0
            .iter()
            .map(|&c| {
                let s: f64 = StandardNormal.sample(&mut self.rng);
                c + self.var_scale * s
            })
            .collect();
        let v1 = self.var_from_coords(&t1);

        let mut accept = false;
        let hard_reject = self.s.restrict && v1.phi_z > v1.phi_u;
        if !hard_reject {
            if let Some(logdet1) = self.model_logdet(&v1) {
                let kappa1 = self.kappa_log_prior(&v1);
                let (model0, model1) = if self.s.likelihood_disabled {
                    (0.0, 0.0)
                } else {
                    (
                        0.5 * (self.cur_model_logdet - self.quad_term(&self.v, &st)),
                        0.5 * (logdet1 - self.quad_term(&v1, &st)),
                    )
                };
                let target0 = model0 + self.var_prior_term(&self.v) + self.cur_kappa;
                let target1 = model1 + self.var_prior_term(&v1) + kappa1;
                if mh_accept(&mut self.rng, target1 - target0) {
                    self.v = v1;
                    self.cur_model_logdet = logdet1;
                    self.cur_kappa = kappa1;
                    accept = true;
                }
            }
        }

        if adapting {
            self.adapt_steps_var += 1;
            let t = self.adapt_steps_var as f64;
            let gain = 1.0 / t.powf(0.6);
            self.var_scale *= ((if accept { 1.0 } else { 0.0 } - 0.234) * gain).exp();
        } else {
            self.acc_var.1 += 1;
            if accept {
                self.acc_var.0 += 1;
            }
        }
        accept
    }

    fn impute_censored(&mut self) {
        for idx in 0..self.censored.len() {
            let i = self.censored[idx];
            let mu = (self.mean_fixed[i] + self.u[i]).exp();
            let (draw, underflow) = truncated_poisson_draw(&mut self.rng, mu, self.threshold);
            if underflow {
                self.underflow_count += 1;
            }
            self.y[i] = draw as f64;
        }
    }
}

#[derive(Default)]
struct QuadStats {
    du2: f64,
    uu: f64,
    drz2: f64,
    rzrz: f64,
    durz: f64,
}
