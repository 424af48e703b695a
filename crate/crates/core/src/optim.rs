//! Small box-constrained maximizers and finite-difference derivatives.
//!
//! Objectives that return a non-finite value are treated as `-inf`, which
//! keeps the searches inside the region where the likelihood is defined.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Bounds<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

impl Bounds<'_> {
    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(self.lower).zip(self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// stop when the spread of simplex values falls below this
    pub ftol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 4000,
            ftol: 1e-12,
            initial_step: 0.25,
        }
    }
}

/// Nelder-Mead maximization with vertices projected onto the box.
pub fn nelder_mead_max<F>(mut f: F, x0: &[f64], bounds: Bounds<'_>, opts: NelderMeadOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        // minimize the negated objective
        -sanitize(f(x))
    };

    let mut start = x0.to_vec();
    bounds.project(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(&start, &mut evals);
    simplex.push((start.clone(), v0));
    for i in 0..n {
        let mut x = start.clone();
        let step = if x[i].abs() > 1e-8 {
            opts.initial_step * x[i].abs().max(1.0)
        } else {
            opts.initial_step
        };
        x[i] += step;
        bounds.project(&mut x);
        if x[i] == start[i] {
            x[i] -= 2.0 * step;
            bounds.project(&mut x);
        }
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while evals < opts.max_evaluations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if best.is_finite() && (worst - best).abs() <= opts.ftol * (1.0 + best.abs()) {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            bounds.project(&mut p);
            p
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        let best_x = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut x: Vec<f64> = best_x.iter().zip(&vertex.0).map(|(b, v)| b + sigma * (v - b)).collect();
            bounds.project(&mut x);
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    OptimResult {
        x,
        value: -v,
        evaluations: evals,
        converged,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// projected-gradient infinity norm for convergence
    pub gtol: f64,
    /// stop when an accepted step improves the objective by less than this
    pub ftol: f64,
    /// finite-difference step (absolute, in the optimizer's coordinates)
    pub step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gtol: 1e-7,
            ftol: 1e-13,
            step: 1e-4,
        }
    }
}

/// Damped Newton ascent with central-difference derivatives and box projection.
///
/// Only improving steps are accepted, so the returned value is never below
/// the value at the (projected) starting point.
pub fn newton_max<F>(mut f: F, x0: &[f64], bounds: Bounds<'_>, opts: NewtonOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut fx = sanitize(f(&x));
    evals += 1;
    let mut converged = false;

    for _ in 0..opts.max_iterations {
        if !fx.is_finite() {
            break;
        }
        let (g, h, used) = derivatives(&mut f, &x, fx, opts.step);
        evals += used;

        // drop coordinates pinned at a bound with the gradient pointing outward
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= bounds.lower[i] && g[i] < 0.0) || (x[i] >= bounds.upper[i] && g[i] > 0.0)))
            .collect();
        let pg = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg < opts.gtol {
            converged = true;
            break;
        }

        let direction = newton_direction(&g, &h, &free);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut trial);
            let ft = sanitize(f(&trial));
            evals += 1;
            if ft > fx {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fnew)) => {
                let gain = fnew - fx;
                x = xn;
                fx = fnew;
                if gain < opts.ftol * (1.0 + fx.abs()) {
                    converged = true;
                    break;
                }
            }
            None => {
                // no ascent along the direction: stationary up to finite-difference noise
                converged = pg < 1e-4;
                break;
            }
        }
    }
    OptimResult {
        x,
        value: fx,
        evaluations: evals,
        converged,
    }
}

fn newton_direction(g: &[f64], h: &DMatrix<f64>, free: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..g.len()).filter(|&i| free[i]).collect();
    let k = idx.len();
    let mut dir = vec![0.0; g.len()];
    if k == 0 {
        return dir;
    }
    let neg_h = DMatrix::from_fn(k, k, |r, c| -h[(idx[r], idx[c])]);
    let gv = DVector::from_iterator(k, idx.iter().map(|&i| g[i]));
    let scale = (0..k).map(|i| neg_h[(i, i)].abs()).fold(0.0, f64::max).max(1e-8);
    let mut mu = 0.0;
    for _ in 0..30 {
        let mut m = neg_h.clone();
        for i in 0..k {
            m[(i, i)] += mu;
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(&gv);
            for (j, &i) in idx.iter().enumerate() {
                dir[i] = d[j];
            }
            return dir;
        }
        mu = if mu == 0.0 { 1e-6 * scale } else { mu * 10.0 };
    }
    // steepest ascent fallback
    for &i in &idx {
        dir[i] = g[i] / scale;
    }
    dir
}

/// Central-difference gradient and Hessian at `x` (with `f(x) = fx`).
fn derivatives<F>(f: &mut F, x: &[f64], fx: f64, step: f64) -> (Vec<f64>, DMatrix<f64>, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x.len();
    let steps: Vec<f64> = vec![step; n];
    let mut evals = 0;
    let mut g = vec![0.0; n];
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for i in 0..n {
        xp[i] = x[i] + steps[i];
        plus[i] = sanitize(f(&xp));
        xp[i] = x[i] - steps[i];
        minus[i] = sanitize(f(&xp));
        xp[i] = x[i];
        evals += 2;
        g[i] = (plus[i] - minus[i]) / (2.0 * steps[i]);
        h[(i, i)] = (plus[i] - 2.0 * fx + minus[i]) / (steps[i] * steps[i]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * steps[i];
                xp[j] = x[j] + sj * steps[j];
                let v = sanitize(f(&xp));
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * steps[i] * steps[j]);
            evals += 4;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    (g, h, evals)
}

fn relative_steps(x: &[f64], rel: f64) -> Vec<f64> {
    x.iter().map(|v| rel * v.abs().max(1e-3)).collect()
}

/// Central-difference gradient with steps `rel * max(|x_i|, 1e-3)`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], rel: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let steps = relative_steps(x, rel);
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + steps[i];
            let fp = f(&xp);
            xp[i] = x[i] - steps[i];
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * steps[i])
        })
        .collect()
}

/// Central-difference Hessian with steps `rel * max(|x_i|, 1e-3)`.
pub fn numeric_hessian<F>(mut f: F, x: &[f64], rel: f64) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let steps = relative_steps(x, rel);
    let fx = f(x);
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + steps[i];
        let fp = f(&xp);
        xp[i] = x[i] - steps[i];
        let fm = f(&xp);
        xp[i] = x[i];
        h[(i, i)] = (fp - 2.0 * fx + fm) / (steps[i] * steps[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * steps[i];
                xp[j] = x[j] + sj * steps[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}
