//! Bound-constrained limited-memory BFGS.
//!
//! Each iteration identifies the active set by gradient projection (a
//! variable sitting on a bound whose negative gradient points outward is
//! held fixed), runs the two-loop recursion on the free subspace, projects
//! the quasi-Newton point back into the box and performs a strong-Wolfe line
//! search along the resulting feasible segment. Curvature pairs are
//! restricted to the free subspace before use and skipped when
//! `s·y <= 1e-10·‖s‖‖y‖`, which keeps every direction a descent direction.

use std::collections::VecDeque;

use crate::error::{ProblemError, Result};
use crate::problem::PlanProblem;
use crate::trace::{Budget, RunTrace, Termination, TraceClock, TraceEntry};

/// Relative curvature threshold below which a correction pair is skipped.
pub const CURVATURE_SKIP: f64 = 1e-10;

/// Smooth objective with gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl Objective for PlanProblem {
    fn dim(&self) -> usize {
        self.n_spots()
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.loss_and_gradient(x)
    }
}

/// Adapter for closures returning `(f, ∇f)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; n],
            hi: vec![hi; n],
        }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::uniform(n, f64::NEG_INFINITY, f64::INFINITY)
    }

    /// The course-level MU box of a plan.
    pub fn for_problem(problem: &PlanProblem) -> Self {
        let (lo, hi) = problem.course_bounds();
        Self::uniform(problem.n_spots(), lo, hi)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.lo.len() != n || self.hi.len() != n {
            return Err(ProblemError::DimensionMismatch {
                what: "bounds",
                expected: n,
                got: self.lo.len().min(self.hi.len()),
            });
        }
        for (index, (&lo, &hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(ProblemError::InfeasibleBounds { index, lo, hi });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (&lo, &hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Projected gradient: zero for components held at a bound by the
    /// sign of the gradient.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let free = self.free_mask(x, g);
        g.iter().zip(&free).map(|(&gi, &f)| if f { gi } else { 0.0 }).collect()
    }

    pub fn free_mask(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        x.iter()
            .zip(g)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|((&xi, &gi), (&lo, &hi))| !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)))
            .collect()
    }
}

/// Ring buffer of correction pairs.
#[derive(Clone, Debug)]
pub struct QuasiNewtonHistory {
    depth: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl QuasiNewtonHistory {
    pub fn new(depth: usize) -> Self {
        Self {
            depth: depth.max(1),
            pairs: VecDeque::with_capacity(depth),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores `(s, y)` if it passes the curvature filter. Returns whether
    /// the pair was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if !passes_curvature(&s, &y) {
            return false;
        }
        if self.pairs.len() == self.depth {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }

    /// Curvature products `s·y` of the stored pairs, oldest first.
    pub fn curvatures(&self) -> Vec<f64> {
        self.pairs.iter().map(|(s, y)| dot(s, y)).collect()
    }

    /// Two-loop recursion: `-H·g`. With no pairs this is `-g`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        self.direction_on(g, None)
    }

    /// Two-loop recursion on the subspace selected by `free`; fixed
    /// components of the result are zero. Pairs whose restriction fails the
    /// curvature filter are ignored.
    pub fn direction_on(&self, g: &[f64], free: Option<&[bool]>) -> Vec<f64> {
        let mask = |v: &[f64]| -> Vec<f64> {
            match free {
                Some(f) => v.iter().zip(f).map(|(&x, &keep)| if keep { x } else { 0.0 }).collect(),
                None => v.to_vec(),
            }
        };
        let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = self
            .pairs
            .iter()
            .filter_map(|(s, y)| {
                let (s, y) = (mask(s), mask(y));
                passes_curvature(&s, &y).then(|| {
                    let rho = 1.0 / dot(&s, &y);
                    (s, y, rho)
                })
            })
            .collect();
        let mut q = mask(g);
        let mut alphas = vec![0.0; pairs.len()];
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alphas[i] = a;
            axpy(-a, y, &mut q);
        }
        let gamma = pairs
            .last()
            .map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &q);
            axpy(alphas[i] - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn passes_curvature(s: &[f64], y: &[f64]) -> bool {
    let sy = dot(s, y);
    let bound = CURVATURE_SKIP * norm(s) * norm(y);
    sy.is_finite() && sy > bound && bound > 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundMode {
    /// Gradient-projection active set plus free-subspace quasi-Newton step.
    ActiveSet,
    /// Unconstrained direction and line search, then clamp. Test-only.
    ProjectAfterLineSearch,
}

#[derive(Clone, Debug)]
pub struct LbfgsbOptions {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Stop when `‖projected gradient‖∞` drops to this value.
    pub pg_tolerance: f64,
    pub bound_mode: BoundMode,
    pub record_x: bool,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
            pg_tolerance: 1e-10,
            bound_mode: BoundMode::ActiveSet,
            record_x: false,
        }
    }
}

struct Point {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

enum SearchOutcome {
    Accepted(Point),
    Failed,
}

/// Strong-Wolfe search on `α ∈ (0, alpha_max]` (bracketing then zoom with
/// safeguarded cubic interpolation). If `alpha_max` is reached while the
/// function is still decreasing, the boundary step is accepted.
fn strong_wolfe<E>(
    mut eval: E,
    f0: f64,
    dphi0: f64,
    alpha_init: f64,
    alpha_max: f64,
    opts: &LbfgsbOptions,
) -> Result<SearchOutcome>
where
    E: FnMut(f64) -> Result<Point>,
{
    let armijo = |p: &Point| p.f <= f0 + opts.c1 * p.alpha * dphi0;
    let curvature = |p: &Point| p.dphi.abs() <= -opts.c2 * dphi0;
    let mut evals = 0;
    let mut prev = Point {
        alpha: 0.0,
        x: Vec::new(),
        f: f0,
        g: Vec::new(),
        dphi: dphi0,
    };
    let mut alpha = alpha_init.min(alpha_max);
    let (mut lo, mut hi) = loop {
        if evals >= opts.max_line_search {
            return Ok(if prev.alpha > 0.0 { SearchOutcome::Accepted(prev) } else { SearchOutcome::Failed });
        }
        let p = eval(alpha)?;
        evals += 1;
        if !p.f.is_finite() || !armijo(&p) || (prev.alpha > 0.0 && p.f >= prev.f) {
            break (prev, p);
        }
        if curvature(&p) {
            return Ok(SearchOutcome::Accepted(p));
        }
        if p.dphi >= 0.0 {
            break (p, prev);
        }
        if alpha >= alpha_max {
            return Ok(SearchOutcome::Accepted(p));
        }
        alpha = (2.0 * alpha).min(alpha_max);
        prev = p;
    };
    // zoom: `lo` satisfies Armijo and has the lowest value seen so far.
    while evals < opts.max_line_search {
        let width = hi.alpha - lo.alpha;
        if width.abs() <= 1e-14 * lo.alpha.abs().max(1e-300) {
            break;
        }
        let cand = if hi.f.is_finite() { cubic_min(&lo, &hi) } else { f64::NAN };
        let (a, b) = (lo.alpha + 0.1 * width, hi.alpha - 0.1 * width);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let alpha = if cand.is_finite() && cand >= a && cand <= b {
            cand
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        let p = eval(alpha)?;
        evals += 1;
        if !p.f.is_finite() || !armijo(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Ok(SearchOutcome::Accepted(p));
            }
            if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    Ok(if lo.alpha > 0.0 { SearchOutcome::Accepted(lo) } else { SearchOutcome::Failed })
}

fn cubic_min(a: &Point, b: &Point) -> f64 {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2)
}

/// Minimizes `objective` over the box from `x0`, recording a trace entry
/// for the start and for every accepted iterate.
pub fn minimize(
    objective: &dyn Objective,
    x0: &[f64],
    bounds: &Bounds,
    budget: Budget,
    opts: &LbfgsbOptions,
) -> Result<RunTrace> {
    let n = objective.dim();
    if x0.len() != n {
        return Err(ProblemError::DimensionMismatch {
            what: "starting point",
            expected: n,
            got: x0.len(),
        });
    }
    bounds.validate(n)?;
    if !bounds.contains(x0) {
        return Err(ProblemError::InvalidProblem("starting point lies outside the bounds".into()));
    }
    let mut clock = TraceClock::start();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective.value_and_gradient(&x)?;
    let mut entries = vec![TraceEntry {
        iter: 0,
        loss: f,
        seconds: clock.elapsed(),
        x: opts.record_x.then(|| x.clone()),
    }];
    if !f.is_finite() {
        return Ok(finish(entries, Termination::NonFinite("initial loss".into()), x));
    }
    if let Some(t) = budget.exhausted(0, 0.0, f) {
        return Ok(finish(entries, t, x));
    }
    let mut history = QuasiNewtonHistory::new(opts.memory);
    let mut iter = 0;
    let termination = loop {
        let pg = bounds.projected_gradient(&x, &g);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.pg_tolerance {
            break Termination::Converged;
        }
        let step = match opts.bound_mode {
            BoundMode::ActiveSet => active_set_step(objective, bounds, &x, f, &g, &mut history, opts)?,
            BoundMode::ProjectAfterLineSearch => {
                project_after_step(objective, bounds, &x, f, &g, &mut history, opts)?
            }
        };
        let Some((x_new, f_new, g_new)) = step else {
            break Termination::LineSearchFailed;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        history.push(s, y);
        x = x_new;
        f = f_new;
        g = g_new;
        iter += 1;
        let seconds = clock.elapsed();
        entries.push(TraceEntry {
            iter,
            loss: f,
            seconds,
            x: opts.record_x.then(|| x.clone()),
        });
        if !f.is_finite() {
            break Termination::NonFinite(format!("loss at iteration {iter}"));
        }
        if let Some(t) = budget.exhausted(iter, seconds, f) {
            break t;
        }
    };
    Ok(finish(entries, termination, x))
}

fn finish(entries: Vec<TraceEntry>, termination: Termination, final_x: Vec<f64>) -> RunTrace {
    RunTrace {
        entries,
        termination,
        final_x,
    }
}

type Step = Option<(Vec<f64>, f64, Vec<f64>)>;

fn active_set_step(
    objective: &dyn Objective,
    bounds: &Bounds,
    x: &[f64],
    f: f64,
    g: &[f64],
    history: &mut QuasiNewtonHistory,
    opts: &LbfgsbOptions,
) -> Result<Step> {
    for attempt in 0..2 {
        let free = bounds.free_mask(x, g);
        let d = if attempt == 0 {
            history.direction_on(g, Some(&free))
        } else {
            g.iter().zip(&free).map(|(&gi, &f)| if f { -gi } else { 0.0 }).collect()
        };
        let mut target: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        bounds.project(&mut target);
        let mut dir: Vec<f64> = target.iter().zip(x).map(|(a, b)| a - b).collect();
        let mut dphi0 = dot(g, &dir);
        if !(dphi0 < 0.0) {
            // Projected steepest descent is always a descent direction away
            // from stationarity.
            let scale = 1.0 / norm(g).max(1e-300);
            let mut t: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - scale * b).collect();
            bounds.project(&mut t);
            dir = t.iter().zip(x).map(|(a, b)| a - b).collect();
            dphi0 = dot(g, &dir);
            if !(dphi0 < 0.0) {
                return Ok(None);
            }
        }
        let alpha_max = max_feasible_step(bounds, x, &dir).max(1.0);
        let alpha_init = if history.is_empty() { (1.0 / norm(&dir)).min(1.0) } else { 1.0 };
        let outcome = strong_wolfe(
            |alpha| evaluate_along(objective, bounds, x, &dir, alpha),
            f,
            dphi0,
            alpha_init,
            alpha_max,
            opts,
        )?;
        match outcome {
            SearchOutcome::Accepted(p) => return Ok(Some((p.x, p.f, p.g))),
            SearchOutcome::Failed => history.clear(),
        }
    }
    Ok(None)
}

fn project_after_step(
    objective: &dyn Objective,
    bounds: &Bounds,
    x: &[f64],
    f: f64,
    g: &[f64],
    history: &mut QuasiNewtonHistory,
    opts: &LbfgsbOptions,
) -> Result<Step> {
    let d = history.direction(g);
    let dphi0 = dot(g, &d);
    if !(dphi0 < 0.0) {
        history.clear();
        return Ok(None);
    }
    let alpha_init = if history.is_empty() { (1.0 / norm(&d)).min(1.0) } else { 1.0 };
    let unbounded = Bounds::unbounded(x.len());
    let outcome = strong_wolfe(
        |alpha| evaluate_along(objective, &unbounded, x, &d, alpha),
        f,
        dphi0,
        alpha_init,
        1e10,
        opts,
    )?;
    match outcome {
        SearchOutcome::Accepted(p) => {
            let mut x_new = p.x;
            bounds.project(&mut x_new);
            let (f_new, g_new) = objective.value_and_gradient(&x_new)?;
            Ok(Some((x_new, f_new, g_new)))
        }
        SearchOutcome::Failed => Ok(None),
    }
}

fn evaluate_along(objective: &dyn Objective, bounds: &Bounds, x: &[f64], dir: &[f64], alpha: f64) -> Result<Point> {
    let mut xa: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + alpha * b).collect();
    bounds.project(&mut xa);
    let (f, g) = objective.value_and_gradient(&xa)?;
    let dphi = dot(&g, dir);
    Ok(Point {
        alpha,
        x: xa,
        f,
        g,
        dphi,
    })
}

/// Largest `α` keeping `x + α·d` inside the box.
fn max_feasible_step(bounds: &Bounds, x: &[f64], d: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..x.len() {
        let limit = if d[i] > 0.0 {
            (bounds.hi[i] - x[i]) / d[i]
        } else if d[i] < 0.0 {
            (bounds.lo[i] - x[i]) / d[i]
        } else {
            continue;
        };
        best = best.min(limit);
    }
    best.min(1e10)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}
