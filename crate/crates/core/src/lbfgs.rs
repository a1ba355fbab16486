//! Limited-memory BFGS with a strong Wolfe line search.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, sqrt};
use serde::{Deserialize, Serialize};

/// Smooth function to minimize. Returns `None` when the value or gradient is
/// not finite (or cannot be evaluated); the line search then backs off.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64>;
}

impl<F: FnMut(&[f64], &mut [f64]) -> Option<f64>> Objective for F {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        self(x, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the objective changes by less than this (relative) over
    /// `stall_window` iterations.
    pub rel_tol: f64,
    pub stall_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Largest step allowed in the infinity norm.
    pub max_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iter: 2000,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            stall_window: 5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
            max_step: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    ObjectiveStall,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
    /// The caller's divergence test fired.
    Diverged,
}

impl StopReason {
    /// Whether the stop counts as convergence.
    pub fn converged(self) -> bool {
        matches!(self, StopReason::GradientTolerance | StopReason::ObjectiveStall)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub stop_reason: StopReason,
    /// Objective after each accepted iteration, starting with the initial value.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(fabs(*x)))
}

struct Trial {
    alpha: f64,
    f: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dphi0: f64,
    cfg: &'a LbfgsConfig,
    evaluations: usize,
}

impl<O: Objective> LineSearch<'_, O> {
    fn eval(&mut self, alpha: f64) -> Option<Trial> {
        let x: Vec<f64> = self.x.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        let mut g = vec![0.0; x.len()];
        self.evaluations += 1;
        let f = self.obj.eval(&x, &mut g)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Trial { alpha, f, x, g })
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.f <= self.f0 + self.cfg.c1 * t.alpha * self.dphi0
    }

    fn curvature(&self, dphi: f64) -> bool {
        fabs(dphi) <= -self.cfg.c2 * self.dphi0
    }

    fn search(&mut self, alpha_init: f64) -> Option<Trial> {
        let mut lo: Option<Trial> = None;
        let mut lo_dphi = self.dphi0;
        let alpha_max = self.cfg.max_step / inf_norm(self.d);
        let mut alpha = alpha_init.min(alpha_max);
        for _ in 0..self.cfg.max_line_search {
            let Some(t) = self.eval(alpha) else {
                // non-finite: shrink toward the last good point
                let base = lo.as_ref().map_or(0.0, |l| l.alpha);
                alpha = base + 0.5 * (alpha - base);
                continue;
            };
            let f_lo = lo.as_ref().map_or(self.f0, |l| l.f);
            if !self.armijo(&t) || (lo.is_some() && t.f >= f_lo) {
                return self.zoom(lo, lo_dphi, Some((t.alpha, t.f, dot(&t.g, self.d))));
            }
            let dphi = dot(&t.g, self.d);
            if self.curvature(dphi) {
                return Some(t);
            }
            if dphi >= 0.0 {
                let hi = (lo.as_ref().map_or(0.0, |l| l.alpha), f_lo, lo_dphi);
                return self.zoom(Some(t), dphi, Some(hi));
            }
            if t.alpha >= alpha_max {
                return Some(t);
            }
            alpha = (2.0 * alpha).min(alpha_max);
            lo = Some(t);
            lo_dphi = dphi;
        }
        lo
    }

    /// Zoom between `lo` (best point satisfying Armijo; `None` = alpha 0)
    /// and `hi` (alpha, f, dphi).
    fn zoom(&mut self, mut lo: Option<Trial>, mut lo_dphi: f64, hi: Option<(f64, f64, f64)>) -> Option<Trial> {
        let (mut hi_a, mut hi_f, mut hi_d) = hi?;
        for _ in 0..self.cfg.max_line_search {
            let (lo_a, lo_f) = lo.as_ref().map_or((0.0, self.f0), |l| (l.alpha, l.f));
            let width = hi_a - lo_a;
            if fabs(width) <= 1e-16 * (1.0 + fabs(lo_a)) {
                break;
            }
            let mut alpha = cubic_min(lo_a, lo_f, lo_dphi, hi_a, hi_f, hi_d);
            let (a, b) = if lo_a < hi_a { (lo_a, hi_a) } else { (hi_a, lo_a) };
            let margin = 0.1 * (b - a);
            if !(alpha > a + margin && alpha < b - margin) {
                alpha = 0.5 * (lo_a + hi_a);
            }
            let Some(t) = self.eval(alpha) else {
                hi_a = alpha;
                hi_f = f64::INFINITY;
                hi_d = f64::NAN;
                continue;
            };
            let dphi = dot(&t.g, self.d);
            if !self.armijo(&t) || t.f >= lo_f {
                hi_a = t.alpha;
                hi_f = t.f;
                hi_d = dphi;
            } else {
                if self.curvature(dphi) {
                    return Some(t);
                }
                if dphi * (hi_a - lo_a) >= 0.0 {
                    hi_a = lo_a;
                    hi_f = lo_f;
                    hi_d = lo_dphi;
                }
                lo = Some(t);
                lo_dphi = dphi;
            }
        }
        // best point with sufficient decrease, if any
        lo
    }
}

/// Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db); NaN if
/// it does not exist.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    if !fb.is_finite() || !db.is_finite() {
        return f64::NAN;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b - a).signum() * sqrt(disc);
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

/// Minimizes `obj` from `x0`.
pub fn minimize<O: Objective>(obj: &mut O, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult {
    minimize_guarded(obj, x0, cfg, &|_: &[f64]| false)
}

/// As [`minimize`], but stops with [`StopReason::Diverged`] as soon as an
/// accepted iterate satisfies `diverged`.
pub fn minimize_guarded<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    cfg: &LbfgsConfig,
    diverged: &dyn Fn(&[f64]) -> bool,
) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut evaluations = 1;
    let f_start = obj.eval(&x, &mut g).filter(|f| f.is_finite() && g.iter().all(|v| v.is_finite()));
    let Some(mut f) = f_start else {
        return LbfgsResult {
            grad_norm: f64::NAN,
            x,
            f: f64::NAN,
            grad: g,
            iterations: 0,
            evaluations,
            stop_reason: StopReason::NonFiniteStart,
            history: Vec::new(),
        };
    };
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let stop;
    let mut retried = false;

    loop {
        if inf_norm(&g) <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        if iterations >= cfg.max_iter {
            stop = StopReason::MaxIterations;
            break;
        }
        let d = two_loop(&g, &pairs);
        let mut dphi0 = dot(&g, &d);
        let (d, alpha0) = if dphi0 < 0.0 && dphi0.is_finite() {
            (d, if pairs.is_empty() { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 })
        } else {
            pairs.clear();
            let sd: Vec<f64> = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &sd);
            (sd, (1.0 / inf_norm(&g)).min(1.0))
        };
        let mut ls = LineSearch {
            obj: &mut *obj,
            x: &x,
            d: &d,
            f0: f,
            dphi0,
            cfg,
            evaluations: 0,
        };
        let trial = ls.search(alpha0);
        evaluations += ls.evaluations;
        let Some(t) = trial else {
            if !retried && !pairs.is_empty() {
                retried = true;
                pairs.clear();
                continue;
            }
            stop = StopReason::LineSearchFailed;
            break;
        };
        retried = false;
        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * sqrt(dot(&s, &s) * dot(&y, &y)) {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = t.x;
        g = t.g;
        f = t.f;
        iterations += 1;
        history.push(f);
        if diverged(&x) {
            stop = StopReason::Diverged;
            break;
        }
        let w = cfg.stall_window;
        if history.len() > w {
            let past = history[history.len() - 1 - w];
            if fabs(past - f) <= cfg.rel_tol * fabs(f).max(1.0) {
                stop = StopReason::ObjectiveStall;
                break;
            }
        }
    }
    LbfgsResult {
        grad_norm: inf_norm(&g),
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        stop_reason: stop,
        history,
    }
}

/// Two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> Option<f64> {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        Some((1.0 - a) * (1.0 - a) + 100.0 * (b - a * a) * (b - a * a))
    }

    #[test]
    fn solves_rosenbrock() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-9,
            ..LbfgsConfig::default()
        };
        let r = minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg);
        assert_eq!(r.stop_reason, StopReason::GradientTolerance);
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn backs_off_from_non_finite_region() {
        // log barrier: undefined for x <= 0, minimum at x = 1
        let mut f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                return None;
            }
            g[0] = 1.0 - 1.0 / x[0];
            Some(x[0] - libm::log(x[0]))
        };
        let r = minimize(&mut f, &[20.0], &LbfgsConfig::default());
        assert!(r.stop_reason.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn guard_stops_divergent_runs() {
        // unbounded below along x
        let mut f = |x: &[f64], g: &mut [f64]| {
            g[0] = -1.0;
            Some(-x[0])
        };
        let r = minimize_guarded(&mut f, &[0.0], &LbfgsConfig::default(), &|x: &[f64]| x[0] > 50.0);
        assert_eq!(r.stop_reason, StopReason::Diverged);
        assert!(!r.stop_reason.converged());
        assert!(r.x[0] > 50.0);
    }

    #[test]
    fn steps_respect_the_cap() {
        let mut f = |x: &[f64], g: &mut [f64]| {
            g[0] = -libm::exp(-x[0]);
            Some(libm::exp(-x[0]))
        };
        let cfg = LbfgsConfig {
            max_iter: 5,
            max_step: 0.5,
            ..LbfgsConfig::default()
        };
        let r = minimize(&mut f, &[0.0], &cfg);
        assert_eq!(r.iterations, 5);
        assert!(r.x[0] <= 2.5 + 1e-12, "{}", r.x[0]);
    }

    #[test]
    fn reports_non_finite_start() {
        let mut f = |_: &[f64], _: &mut [f64]| None;
        let r = minimize(&mut f, &[0.0], &LbfgsConfig::default());
        assert_eq!(r.stop_reason, StopReason::NonFiniteStart);
    }
}
