//! Derivative-free maximizers used by the REML fitters: a coordinate-wise
//! golden-section pass to get near the optimum cheaply, refined by a
//! Nelder-Mead simplex. Objectives may return `-inf` for infeasible points
//! (non-PD parameter tuples); both routines tolerate that.

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// One golden-section line search maximizing `f` along coordinate `k`,
/// bracketing `x[k]` in `[x[k] - half_width, x[k] + half_width]`.
fn golden_coordinate<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &mut Vec<f64>,
    k: usize,
    half_width: f64,
    iters: usize,
) -> f64 {
    let (mut a, mut b) = (x[k] - half_width, x[k] + half_width);
    let eval = |t: f64, x: &mut Vec<f64>, f: &mut F| {
        let old = x[k];
        x[k] = t;
        let v = f(x);
        x[k] = old;
        v
    };
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = eval(c, x, f);
    let mut fd = eval(d, x, f);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = eval(c, x, f);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = eval(d, x, f);
        }
    }
    let best = if fc > fd { c } else { d };
    let fbest = fc.max(fd);
    let fcur = f(x);
    if fbest > fcur {
        x[k] = best;
        fbest
    } else {
        fcur
    }
}

/// Cyclic coordinate refinement over all coordinates.
pub fn coordinate_search<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &mut Vec<f64>,
    sweeps: usize,
    half_width: f64,
) -> f64 {
    let mut best = f(x);
    for s in 0..sweeps {
        let hw = half_width / (1 + s) as f64;
        for k in 0..x.len() {
            best = golden_coordinate(f, x, k, hw, 24);
        }
    }
    best
}

/// Result of a Nelder-Mead run.
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub fmax: f64,
    pub converged: bool,
}

/// Standard Nelder-Mead (maximization) with reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5. Stops when the simplex function spread falls
/// below `tol` or the evaluation budget runs out.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_evals: usize,
) -> SimplexResult {
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |p: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for k in 0..dim {
        let mut p = x0.to_vec();
        p[k] += step;
        let fp = eval(&p, &mut evals);
        simplex.push((p, fp));
    }

    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let spread = simplex[0].1 - simplex[dim].1;
        if spread.abs() < tol && simplex[dim].1.is_finite() {
            converged = true;
            break;
        }

        // centroid of all but the worst
        let mut centroid = vec![0.0; dim];
        for s in simplex.iter().take(dim) {
            for k in 0..dim {
                centroid[k] += s.0[k];
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let worst = simplex[dim].clone();
        let reflect: Vec<f64> =
            (0..dim).map(|k| centroid[k] + (centroid[k] - worst.0[k])).collect();
        let fr = eval(&reflect, &mut evals);

        if fr > simplex[0].1 {
            let expand: Vec<f64> =
                (0..dim).map(|k| centroid[k] + 2.0 * (centroid[k] - worst.0[k])).collect();
            let fe = eval(&expand, &mut evals);
            simplex[dim] = if fe > fr { (expand, fe) } else { (reflect, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> =
                (0..dim).map(|k| centroid[k] + 0.5 * (worst.0[k] - centroid[k])).collect();
            let fc = eval(&contract, &mut evals);
            if fc > worst.1 {
                simplex[dim] = (contract, fc);
            } else {
                // shrink toward the best
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    for k in 0..dim {
                        s.0[k] = best[k] + 0.5 * (s.0[k] - best[k]);
                    }
                    s.1 = eval(&s.0.clone(), &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    SimplexResult { x: simplex[0].0.clone(), fmax: simplex[0].1, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_maximum() {
        let mut f = |x: &[f64]| -((x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2));
        let mut x = vec![0.0, 0.0];
        coordinate_search(&mut f, &mut x, 2, 2.0);
        let r = nelder_mead(&mut f, &x, 0.2, 1e-12, 2000);
        assert!(r.converged);
        assert!((r.x[0] - 1.5).abs() < 1e-5);
        assert!((r.x[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn survives_infeasible_regions() {
        // -inf outside the unit disk
        let mut f = |x: &[f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 > 1.0 {
                f64::NEG_INFINITY
            } else {
                -(x[0] - 0.3).powi(2) - (x[1] - 0.2).powi(2)
            }
        };
        let r = nelder_mead(&mut f, &[0.0, 0.0], 0.4, 1e-12, 4000);
        assert!((r.x[0] - 0.3).abs() < 1e-4);
        assert!((r.x[1] - 0.2).abs() < 1e-4);
    }
}
