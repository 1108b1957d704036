//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The iterate is a [`DenseMatrix`] but the algorithm treats it as a flat
//! vector. Search directions come from the usual two-loop recursion with the
//! `sᵀy / yᵀy` initial Hessian scaling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub steps: usize,
    pub history: usize,
    /// Stop once the gradient's Euclidean norm drops below this.
    pub tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            history: 10,
            tol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient norm fell below the tolerance.
    Converged,
    /// Used the whole step budget.
    MaxSteps,
    /// Line search could not make progress (usually: at machine precision).
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DenseMatrix,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after every accepted iterate, starting with the initial one.
    pub trace: Vec<f64>,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn two_loop(grad: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Probe {
    alpha: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

struct LineSearch<'a, F, G> {
    f: &'a F,
    g: &'a G,
    rows: usize,
    cols: usize,
    x0: &'a [f64],
    dir: &'a [f64],
    value0: f64,
    slope0: f64,
    cfg: &'a LbfgsConfig,
}

impl<F, G> LineSearch<'_, F, G>
where
    F: Fn(&DenseMatrix) -> f64,
    G: Fn(&DenseMatrix) -> DenseMatrix,
{
    fn probe(&self, alpha: f64) -> Probe {
        let x: Vec<f64> = self.x0.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let m = DenseMatrix::from_vec_unchecked(self.rows, self.cols, x);
        let value = (self.f)(&m);
        let grad = (self.g)(&m).into_values();
        let slope = dot(&grad, self.dir);
        Probe {
            alpha,
            x: m.into_values(),
            value,
            grad,
            slope,
        }
    }

    fn armijo_fails(&self, p: &Probe) -> bool {
        !p.value.is_finite() || p.value > self.value0 + self.cfg.c1 * p.alpha * self.slope0
    }

    fn curvature_ok(&self, p: &Probe) -> bool {
        p.slope.is_finite() && p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// Returns an accepted probe, or `None` if no step with sufficient
    /// decrease was found.
    fn run(&self, alpha_init: f64) -> Option<Probe> {
        let mut lo = Probe {
            alpha: 0.0,
            x: self.x0.to_vec(),
            value: self.value0,
            grad: Vec::new(),
            slope: self.slope0,
        };
        let mut alpha = alpha_init;
        for i in 0..self.cfg.max_line_search {
            let p = self.probe(alpha);
            if self.armijo_fails(&p) || (i > 0 && p.value >= lo.value) {
                return self.zoom(lo, p);
            }
            if self.curvature_ok(&p) {
                return Some(p);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, lo);
            }
            alpha *= 2.0;
            lo = p;
        }
        (lo.alpha > 0.0).then_some(lo)
    }

    fn zoom(&self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        for _ in 0..self.cfg.max_line_search {
            let width = hi.alpha - lo.alpha;
            // Quadratic interpolation from (lo value, lo slope, hi value),
            // safeguarded into the interior of the bracket.
            let mut alpha = lo.alpha + 0.5 * width;
            if hi.value.is_finite() {
                let denom = 2.0 * (hi.value - lo.value - lo.slope * width);
                if denom > 0.0 {
                    let cand = lo.alpha - lo.slope * width * width / denom;
                    let (a, b) = if lo.alpha < hi.alpha {
                        (lo.alpha + 0.1 * width, hi.alpha - 0.1 * width)
                    } else {
                        (hi.alpha - 0.1 * width, lo.alpha + 0.1 * width)
                    };
                    let (a, b) = if a <= b { (a, b) } else { (b, a) };
                    if cand.is_finite() {
                        alpha = cand.clamp(a, b);
                    }
                }
            }
            if (alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
            let p = self.probe(alpha);
            if self.armijo_fails(&p) || p.value >= lo.value {
                hi = p;
            } else {
                if self.curvature_ok(&p) {
                    return Some(p);
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        (lo.alpha > 0.0 && lo.value < self.value0).then_some(lo)
    }
}

/// Minimizes `f` from `init` with L-BFGS.
///
/// Returns after `cfg.steps` iterations, when the gradient norm drops below
/// `cfg.tol`, or when the line search stalls. Every accepted iterate
/// satisfies the sufficient-decrease condition, so the objective never
/// increases along the way.
pub fn lbfgs_minimize<F, G>(f: F, grad: G, init: &DenseMatrix, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: Fn(&DenseMatrix) -> f64,
    G: Fn(&DenseMatrix) -> DenseMatrix,
{
    let (rows, cols) = init.shape();
    let mut x = init.values().to_vec();
    let mut value = f(init);
    let mut g = grad(init).into_values();
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::LbfgsDiverged {
            iteration: 0,
            last_finite: Box::new(init.clone()),
        });
    }
    if g.len() != x.len() {
        return Err(Error::ShapeError(format!(
            "gradient has {} entries, iterate has {}",
            g.len(),
            x.len()
        )));
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.history);
    let mut trace = vec![value];
    let mut termination = Termination::MaxSteps;
    let mut iterations = 0;

    for it in 0..cfg.steps {
        let gnorm = norm(&g);
        if gnorm < cfg.tol {
            termination = Termination::Converged;
            break;
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // Curvature information went bad; restart from steepest descent.
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let alpha_init = if history.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

        let ls = LineSearch {
            f: &f,
            g: &grad,
            rows,
            cols,
            x0: &x,
            dir: &dir,
            value0: value,
            slope0: slope,
            cfg,
        };
        let Some(accepted) = ls.run(alpha_init) else {
            termination = Termination::Stalled;
            break;
        };
        if accepted.grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::LbfgsDiverged {
                iteration: it,
                last_finite: Box::new(DenseMatrix::from_vec_unchecked(rows, cols, x)),
            });
        }

        let s: Vec<f64> = accepted.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == cfg.history {
                history.pop_front();
            }
            if cfg.history > 0 {
                history.push_back(Pair { s, y, rho: 1.0 / sy });
            }
        }
        x = accepted.x;
        g = accepted.grad;
        value = accepted.value;
        trace.push(value);
        iterations = it + 1;
    }

    if termination == Termination::MaxSteps && norm(&g) < cfg.tol {
        termination = Termination::Converged;
    }
    Ok(LbfgsOutcome {
        grad_norm: norm(&g),
        x: DenseMatrix::from_vec_unchecked(rows, cols, x),
        value,
        iterations,
        termination,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{solve_min_norm_ls, QuadraticObjective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dimensional_quadratic() {
        let f = |x: &DenseMatrix| (x.get(0, 0) - 3.0).powi(2);
        let g = |x: &DenseMatrix| DenseMatrix::from_rows(&[&[2.0 * (x.get(0, 0) - 3.0)]]);
        let out = lbfgs_minimize(f, g, &DenseMatrix::zeros(1, 1), &LbfgsConfig::with_steps(100)).unwrap();
        assert!((out.x.get(0, 0) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_steps_returns_init() {
        let init = DenseMatrix::from_rows(&[&[1.5, -2.0]]);
        let out = lbfgs_minimize(
            |x| x.frobenius_norm_sq(),
            |x| x.scaled(2.0),
            &init,
            &LbfgsConfig::with_steps(0),
        )
        .unwrap();
        assert_eq!(out.x, init);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn convex_quadratic_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::random_normal(6, 9, 1.0, &mut rng);
        let gram = x.matmul_t(&x).unwrap();
        let cross = DenseMatrix::random_normal(1, 6, 1.0, &mut rng);
        let q = QuadraticObjective::new(gram.clone(), cross.clone(), 0.0).unwrap();
        let expected = solve_min_norm_ls(&gram, &cross).unwrap();
        let out = lbfgs_minimize(|d| q.value(d), |d| q.gradient(d), &DenseMatrix::zeros(1, 6), &LbfgsConfig::with_steps(200))
            .unwrap();
        assert!(out.x.max_abs_diff(&expected).unwrap() < 1e-5);
    }

    #[test]
    fn rosenbrock_is_monotone() {
        let f = |x: &DenseMatrix| {
            let (a, b) = (x.get(0, 0), x.get(0, 1));
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let g = |x: &DenseMatrix| {
            let (a, b) = (x.get(0, 0), x.get(0, 1));
            DenseMatrix::from_rows(&[&[-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]])
        };
        let out = lbfgs_minimize(f, g, &DenseMatrix::from_rows(&[&[-1.2, 1.0]]), &LbfgsConfig::with_steps(200)).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((out.x.get(0, 0) - 1.0).abs() < 1e-5, "{:?}", out.x);
    }

    #[test]
    fn non_finite_start_is_divergence() {
        let err = lbfgs_minimize(
            |_| f64::NAN,
            |x| x.clone(),
            &DenseMatrix::zeros(1, 1),
            &LbfgsConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LbfgsDiverged { .. }));
    }
}
