//! Input design: the pure-control QP and the two side-constrained formulations.
//!
//! - `PureControl`: minimize `J_c` over `M u ≤ b`.
//! - `DetectionConstrained`: minimize `J_c` subject to `Ĵ_d ≤ J̄_d` and `M u ≤ b`.
//! - `ControlConstrained`: minimize `Ĵ_d` subject to `J_c ≤ J̄_c` and `M u ≤ b`.
//!
//! The side-constrained problems are non-convex. They are solved locally by an augmented
//! Lagrangian on the scalar side constraint, with the polytope kept exact by sequential
//! quadratic subproblems, from several starting points.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::standard_normal;
use crate::objectives::{ControlObjectiveForm, DetectionBoundForm, ExpandedConstraints};
use crate::scalar::{lit, to_f64, Real};

use qp::{kkt_residual, project, solve_dual, Polytope, PrimalActiveSet, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    PureControl,
    DetectionConstrained,
    ControlConstrained,
}

impl Formulation {
    pub const ALL: [Formulation; 3] =
        [Formulation::PureControl, Formulation::DetectionConstrained, Formulation::ControlConstrained];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::PureControl => "pure-control",
            Formulation::DetectionConstrained => "detection-constrained",
            Formulation::ControlConstrained => "control-constrained",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown formulation `{s}`")))
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec<T: Real> {
    pub kind: Formulation,
    pub control: ControlObjectiveForm<T>,
    pub detection: DetectionBoundForm<T>,
    pub constraints: ExpandedConstraints<T>,
    /// `J̄_d`, used by `DetectionConstrained`.
    pub jd_max: T,
    /// `J̄_c`, used by `ControlConstrained`; may be `+∞`.
    pub jc_max: T,
}

impl<T: Real> ProblemSpec<T> {
    pub fn new(
        kind: Formulation,
        control: ControlObjectiveForm<T>,
        detection: DetectionBoundForm<T>,
        constraints: ExpandedConstraints<T>,
        jd_max: T,
        jc_max: T,
    ) -> Result<Self> {
        let dim = control.dim();
        if detection.dim() != dim || constraints.dim() != dim {
            return Err(Error::invalid(format!(
                "forms disagree on dimension: control {dim}, detection {}, constraints {}",
                detection.dim(),
                constraints.dim()
            )));
        }
        match kind {
            Formulation::DetectionConstrained if !(jd_max > T::zero()) => {
                return Err(Error::invalid("J̄_d must be positive"))
            }
            Formulation::ControlConstrained if !(jc_max > T::zero()) => {
                return Err(Error::invalid("J̄_c must be positive"))
            }
            _ => {}
        }
        Ok(Self { kind, control, detection, constraints, jd_max, jc_max })
    }

    pub fn dim(&self) -> usize {
        self.control.dim()
    }

    /// Objective of the selected formulation at `u`.
    pub fn objective(&self, u: &DVector<T>) -> T {
        match self.kind {
            Formulation::ControlConstrained => self.detection.eval(u),
            _ => self.control.eval(u),
        }
    }

    /// `J̄ − J(u)` for the side constraint; `+∞` for the pure-control problem.
    pub fn side_slack(&self, u: &DVector<T>) -> T {
        match self.kind {
            Formulation::PureControl => T::max_value().unwrap_or(T::one()),
            Formulation::DetectionConstrained => self.jd_max - self.detection.eval(u),
            Formulation::ControlConstrained => self.jc_max - self.control.eval(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    MaxIterations,
}

impl SolveStatus {
    pub fn is_accepted(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic<T: Real> {
    /// Farkas multipliers `y ≥ 0` with `Mᵀ y = 0` and `bᵀ y < 0`.
    Certificate(DVector<T>),
    /// Smallest side-constraint value reached by any start.
    MinSideValue(T),
}

#[derive(Debug, Clone)]
pub struct Solution<T: Real> {
    pub u_star: DVector<T>,
    pub objective_value: T,
    pub constraint_violation: T,
    pub side_constraint_slack: T,
    pub stationarity: T,
    pub status: SolveStatus,
    pub restarts_used: usize,
    pub diagnostic: Option<Diagnostic<T>>,
}

/// One line of the solver trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub restart: usize,
    pub iteration: usize,
    pub objective: f64,
    pub side_value: f64,
    pub violation: f64,
    pub multiplier: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub stationarity_tol: f64,
    pub constraint_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub restarts: usize,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            stationarity_tol: 1e-6,
            constraint_tol: 1e-6,
            max_outer: 500,
            max_inner: 200,
            restarts: 16,
            seed: 0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport<T: Real> {
    pub solution: Solution<T>,
    pub trace: Vec<TraceRecord>,
}

/// Dispatches on the problem kind.
pub fn solve<T: Real>(spec: &ProblemSpec<T>, opts: &SolverOptions) -> Result<SolveReport<T>> {
    match spec.kind {
        Formulation::PureControl => Ok(SolveReport { solution: solve_pure_control(spec)?, trace: Vec::new() }),
        _ => solve_with_side_constraint(spec, opts),
    }
}

/// Global minimizer of the convex control objective over the polytope.
pub fn solve_pure_control<T: Real>(spec: &ProblemSpec<T>) -> Result<Solution<T>> {
    let g = (&spec.control.phi + spec.control.phi.transpose()).clone();
    let a = &spec.control.psi;
    let poly = Polytope::new(&spec.constraints.m, &spec.constraints.b);
    let dim = spec.dim();
    let sol = solve_dual(&g, a, &poly, 50 * (poly.len() + dim + 1))
        .ok_or_else(|| Error::invalid("control Hessian is not positive definite"))?;
    let status = match sol.status {
        QpStatus::Optimal => SolveStatus::Optimal,
        QpStatus::Infeasible => SolveStatus::Infeasible,
        QpStatus::MaxIterations => SolveStatus::MaxIterations,
    };
    let stationarity = kkt_residual(&g, a, &spec.constraints.m, &spec.constraints.b, &sol.x, &sol.multipliers);
    Ok(Solution {
        objective_value: spec.control.eval(&sol.x),
        constraint_violation: spec.constraints.max_violation(&sol.x),
        side_constraint_slack: spec.side_slack(&sol.x),
        stationarity,
        status,
        restarts_used: 0,
        diagnostic: sol.certificate.map(Diagnostic::Certificate),
        u_star: sol.x,
    })
}

/// Scaled view of the objective and side constraint.
struct Scaled<'a, T: Real> {
    spec: &'a ProblemSpec<T>,
    f_scale: T,
}

impl<'a, T: Real> Scaled<'a, T> {
    fn f(&self, u: &DVector<T>) -> T {
        self.spec.objective(u) / self.f_scale
    }

    fn f_grad(&self, u: &DVector<T>) -> DVector<T> {
        let g = match self.spec.kind {
            Formulation::ControlConstrained => self.spec.detection.gradient(u),
            _ => self.spec.control.gradient(u),
        };
        g / self.f_scale
    }

    fn f_curv(&self, u: &DVector<T>) -> DMatrix<T> {
        let h = match self.spec.kind {
            Formulation::ControlConstrained => self.spec.detection.gauss_newton(u),
            _ => &self.spec.control.phi * lit::<T>(2.0),
        };
        h / self.f_scale
    }

    /// Side value normalized as `J/J̄ − 1` (≤ 0 when satisfied).
    fn c(&self, u: &DVector<T>) -> T {
        match self.spec.kind {
            Formulation::DetectionConstrained => self.spec.detection.eval(u) / self.spec.jd_max - T::one(),
            _ => self.spec.control.eval(u) / self.spec.jc_max - T::one(),
        }
    }

    fn c_grad(&self, u: &DVector<T>) -> DVector<T> {
        match self.spec.kind {
            Formulation::DetectionConstrained => self.spec.detection.gradient(u) / self.spec.jd_max,
            _ => self.spec.control.gradient(u) / self.spec.jc_max,
        }
    }

    fn c_curv(&self, u: &DVector<T>) -> DMatrix<T> {
        match self.spec.kind {
            Formulation::DetectionConstrained => self.spec.detection.gauss_newton(u) / self.spec.jd_max,
            _ => &self.spec.control.phi * (lit::<T>(2.0) / self.spec.jc_max),
        }
    }

    fn side_active(&self) -> bool {
        match self.spec.kind {
            Formulation::ControlConstrained => self.spec.jc_max.is_finite(),
            _ => true,
        }
    }

    /// `f + (max(0, λ + ρ c)² − λ²) / (2ρ)`.
    fn merit(&self, u: &DVector<T>, lambda: T, rho: T) -> T {
        let mut v = self.f(u);
        if self.side_active() {
            let shifted = (lambda + rho * self.c(u)).max(T::zero());
            v += (shifted * shifted - lambda * lambda) / (lit::<T>(2.0) * rho);
        }
        v
    }

    fn merit_grad(&self, u: &DVector<T>, lambda: T, rho: T) -> DVector<T> {
        let mut g = self.f_grad(u);
        if self.side_active() {
            let shifted = (lambda + rho * self.c(u)).max(T::zero());
            if shifted > T::zero() {
                g += self.c_grad(u) * shifted;
            }
        }
        g
    }

    fn merit_curv(&self, u: &DVector<T>, lambda: T, rho: T) -> DMatrix<T> {
        let mut h = self.f_curv(u);
        if self.side_active() {
            let shifted = (lambda + rho * self.c(u)).max(T::zero());
            if shifted > T::zero() {
                let cg = self.c_grad(u);
                h += &cg * cg.transpose() * rho + self.c_curv(u) * shifted;
            }
        }
        h
    }
}

struct LocalResult<T: Real> {
    u: DVector<T>,
    multiplier: T,
}

fn regularize<T: Real>(h: &mut DMatrix<T>, floor: T) {
    let dim = h.nrows();
    let scale = (h.trace() / lit(dim.max(1) as f64)).abs().max(T::one());
    let shift = floor * scale;
    for i in 0..dim {
        h[(i, i)] += shift;
    }
    *h = (&*h + h.transpose()) * lit::<T>(0.5);
}

fn local_solve<T: Real>(
    scaled: &Scaled<'_, T>,
    poly: &Polytope<T>,
    start: DVector<T>,
    opts: &SolverOptions,
    restart: usize,
    trace: &mut Vec<TraceRecord>,
) -> LocalResult<T> {
    let ctol: T = lit(opts.constraint_tol * 1e-3);
    let mut u = start;
    let mut lambda = T::zero();
    let mut rho: T = lit(100.0);
    let mut working = PrimalActiveSet::new();
    let mut prev_c = T::max_value().unwrap_or(T::one());
    let mut iteration = 0;
    for _outer in 0..opts.max_outer {
        // inner: minimize the merit function over the polytope
        let mut damping: T = lit(1e-8);
        for _ in 0..opts.max_inner {
            iteration += 1;
            let g = scaled.merit_grad(&u, lambda, rho);
            let mut h = scaled.merit_curv(&u, lambda, rho);
            regularize(&mut h, damping);
            let lin = &g - &h * &u;
            let Some(step) = working.solve(&h, &lin, poly, &u, 4 * (poly.len() + u.len()) + 10) else {
                damping *= lit(10.0);
                continue;
            };
            let d = &step.x - &u;
            let slope = g.dot(&d);
            if d.amax() <= lit::<T>(1e-12) * (T::one() + u.amax()) || slope >= T::zero() {
                break;
            }
            let m0 = scaled.merit(&u, lambda, rho);
            // predicted decrease already negligible
            if -slope <= lit::<T>(1e-10) * (T::one() + m0.abs()) {
                break;
            }
            let mut t = T::one();
            let mut accepted = false;
            for _ in 0..40 {
                let trial = &u + &d * t;
                if scaled.merit(&trial, lambda, rho) <= m0 + lit::<T>(1e-4) * t * slope {
                    u = trial;
                    accepted = true;
                    break;
                }
                t *= lit(0.5);
            }
            if !accepted {
                damping *= lit(10.0);
                if damping > lit(1e6) {
                    break;
                }
                continue;
            }
            damping = (damping * lit(0.1)).max(lit(1e-10));
            if (d * t).amax() <= lit::<T>(1e-11) * (T::one() + u.amax()) {
                break;
            }
        }
        if opts.record_trace {
            trace.push(TraceRecord {
                restart,
                iteration,
                objective: to_f64(scaled.spec.objective(&u)),
                side_value: to_f64(scaled.c(&u)),
                violation: to_f64(scaled.spec.constraints.max_violation(&u)),
                multiplier: to_f64(lambda),
                penalty: to_f64(rho),
            });
        }
        if !scaled.side_active() {
            break;
        }
        let c = scaled.c(&u);
        let complementarity = c.max(-lambda / rho);
        lambda = (lambda + rho * c).max(T::zero());
        if complementarity.abs() <= ctol {
            break;
        }
        if c > T::zero() && c > lit::<T>(0.25) * prev_c {
            rho *= lit(10.0);
        }
        prev_c = c.max(T::zero());
        if rho > lit(1e12) {
            break;
        }
    }
    LocalResult { u, multiplier: lambda }
}

/// Projected-gradient residual of the Lagrangian in the scaled problem.
fn stationarity<T: Real>(scaled: &Scaled<'_, T>, poly: &Polytope<T>, u: &DVector<T>, lambda: T) -> T {
    let mut g = scaled.f_grad(u);
    if scaled.side_active() && lambda > T::zero() {
        g += scaled.c_grad(u) * lambda;
    }
    match project(poly, &(u - &g)) {
        Some(p) => (p - u).amax(),
        None => T::max_value().unwrap_or(T::one()),
    }
}

/// Moves a point with a slightly violated side constraint toward a strictly feasible anchor.
fn restore<T: Real>(scaled: &Scaled<'_, T>, u: &DVector<T>, anchor: &DVector<T>) -> DVector<T> {
    if scaled.c(u) <= T::zero() {
        return u.clone();
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..80 {
        let mid = (lo + hi) * lit::<T>(0.5);
        let trial = u + (anchor - u) * mid;
        if scaled.c(&trial) <= T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    u + (anchor - u) * hi
}

/// Local solutions of a side-constrained formulation from several starts; best feasible wins.
pub fn solve_with_side_constraint<T: Real>(spec: &ProblemSpec<T>, opts: &SolverOptions) -> Result<SolveReport<T>> {
    if spec.kind == Formulation::PureControl {
        return Err(Error::invalid("pure-control problems have no side constraint"));
    }
    let dim = spec.dim();
    let poly = Polytope::new(&spec.constraints.m, &spec.constraints.b);
    let pure = solve_pure_control(spec)?;
    if pure.status == SolveStatus::Infeasible {
        return Ok(SolveReport {
            solution: Solution { restarts_used: 0, ..pure },
            trace: Vec::new(),
        });
    }
    let base = pure.u_star.clone();

    let f_scale = spec.objective(&base).abs().max(T::one());
    let scaled = Scaled { spec, f_scale };

    let mut starts = vec![base.clone()];
    if let Some(z) = project(&poly, &DVector::zeros(dim)) {
        if (&z - &base).amax() > lit::<T>(1e-9) * (T::one() + base.amax()) {
            starts.push(z);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let spread = base.amax().max(T::one());
    while starts.len() < opts.restarts.max(1) {
        let noise: DVector<T> = standard_normal(&mut rng, dim);
        // alternate local perturbations with wide ones that can reach other basins
        let scale = if starts.len() % 2 == 0 { spread } else { spread * lit::<T>(4.0) };
        match project(&poly, &(&base + noise * scale)) {
            Some(s) => starts.push(s),
            None => break,
        }
    }
    starts.truncate(opts.restarts.max(1));

    let mut trace = Vec::new();
    let mut candidates = Vec::with_capacity(starts.len());
    let mut min_side = T::max_value().unwrap_or(T::one());
    // strictly side-feasible anchor for restoration: the pure-control optimum when it qualifies
    let mut anchor = (scaled.c(&base) < T::zero()).then(|| base.clone());
    for (restart, start) in starts.into_iter().enumerate() {
        let local = local_solve(&scaled, &poly, start, opts, restart, &mut trace);
        let c = scaled.c(&local.u);
        min_side = min_side.min(c);
        if c < -lit::<T>(1e-9) && anchor.is_none() {
            anchor = Some(local.u.clone());
        }
        candidates.push(local);
    }

    let side_tol: T = lit(opts.constraint_tol);
    let mut best: Option<(usize, DVector<T>, T, T)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        let u = match &anchor {
            Some(a) if scaled.side_active() => restore(&scaled, &cand.u, a),
            _ => cand.u.clone(),
        };
        let slack = spec.side_slack(&u);
        if !(slack >= -side_tol) || spec.constraints.max_violation(&u) > side_tol {
            continue;
        }
        let value = spec.objective(&u);
        let better = match &best {
            None => true,
            Some((_, bu, bv, _)) => {
                let tie = lit::<T>(1e-9) * (T::one() + bv.abs());
                if value < *bv - tie {
                    true
                } else if (value - *bv).abs() <= tie {
                    let (n_new, n_old) = (u.norm(), bu.norm());
                    n_new < n_old || (n_new == n_old && lexicographic_less(&u, bu))
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((idx, u, value, cand.multiplier));
        }
    }

    let restarts_used = candidates.len();
    let solution = match best {
        None => {
            let side_min = match spec.kind {
                Formulation::DetectionConstrained => (min_side + T::one()) * spec.jd_max,
                _ => (min_side + T::one()) * spec.jc_max,
            };
            let u = candidates
                .into_iter()
                .min_by(|a, b| scaled.c(&a.u).partial_cmp(&scaled.c(&b.u)).unwrap())
                .map(|c| c.u)
                .unwrap_or(base);
            Solution {
                objective_value: spec.objective(&u),
                constraint_violation: spec.constraints.max_violation(&u),
                side_constraint_slack: spec.side_slack(&u),
                stationarity: T::max_value().unwrap_or(T::one()),
                status: SolveStatus::Infeasible,
                restarts_used,
                diagnostic: Some(Diagnostic::MinSideValue(side_min)),
                u_star: u,
            }
        }
        Some((_, u, value, multiplier)) => {
            let stat = stationarity(&scaled, &poly, &u, multiplier);
            let status = if stat <= lit(opts.stationarity_tol) {
                SolveStatus::Optimal
            } else {
                SolveStatus::Feasible
            };
            Solution {
                objective_value: value,
                constraint_violation: spec.constraints.max_violation(&u),
                side_constraint_slack: spec.side_slack(&u),
                stationarity: stat,
                status,
                restarts_used,
                diagnostic: None,
                u_star: u,
            }
        }
    };
    Ok(SolveReport { solution, trace })
}

fn lexicographic_less<T: Real>(a: &DVector<T>, b: &DVector<T>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ExpandedConstraints;
    use nalgebra::{dmatrix, dvector};

    fn control(phi: DMatrix<f64>, psi: DVector<f64>, c0: f64) -> ControlObjectiveForm<f64> {
        ControlObjectiveForm { phi, psi, c0, noise_floor: 0.0 }
    }

    fn empty_detection(dim: usize) -> DetectionBoundForm<f64> {
        use crate::model::{enumerate_modes, LinearGaussianSystem};
        let sys = LinearGaussianSystem::new(
            dmatrix![1.0],
            DMatrix::zeros(1, 1),
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0],
        )
        .unwrap();
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        crate::objectives::build_detection_bound(&sys, &modes, dim).unwrap()
    }

    #[test]
    fn scalar_stationary_point() {
        let spec = ProblemSpec::new(
            Formulation::PureControl,
            control(dmatrix![2.0], dvector![-4.0], 3.0),
            empty_detection(1),
            ExpandedConstraints::none(1),
            1.0,
            1.0,
        )
        .unwrap();
        let sol = solve_pure_control(&spec).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.u_star[0] - 1.0).abs() < 1e-14);
        assert!((sol.objective_value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn clamped_scalar() {
        let cons = ExpandedConstraints { m: dmatrix![1.0], b: dvector![0.5], tags: vec![] };
        let spec = ProblemSpec::new(
            Formulation::PureControl,
            control(dmatrix![2.0], dvector![-4.0], 0.0),
            empty_detection(1),
            cons,
            1.0,
            1.0,
        )
        .unwrap();
        let sol = solve_pure_control(&spec).unwrap();
        assert!((sol.u_star[0] - 0.5).abs() < 1e-14);
        assert!(sol.stationarity < 1e-12);
    }

    #[test]
    fn infeasible_constraints_reported() {
        let cons = ExpandedConstraints { m: dmatrix![1.0; -1.0], b: dvector![-1.0, -1.0], tags: vec![] };
        let spec = ProblemSpec::new(
            Formulation::PureControl,
            control(dmatrix![1.0], dvector![0.0], 0.0),
            empty_detection(1),
            cons,
            1.0,
            1.0,
        )
        .unwrap();
        let sol = solve_pure_control(&spec).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(matches!(sol.diagnostic, Some(Diagnostic::Certificate(_))));
    }

    #[test]
    fn thresholds_must_be_positive() {
        let r = ProblemSpec::new(
            Formulation::DetectionConstrained,
            control(dmatrix![1.0], dvector![0.0], 0.0),
            empty_detection(1),
            ExpandedConstraints::none(1),
            0.0,
            1.0,
        );
        assert!(r.is_err());
        assert_eq!("control-constrained".parse::<Formulation>().unwrap(), Formulation::ControlConstrained);
        assert!("nope".parse::<Formulation>().is_err());
    }
}
