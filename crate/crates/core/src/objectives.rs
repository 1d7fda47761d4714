//! Deterministic forms of the design objectives over the stacked control sequence.
//!
//! With the whole window's input fixed at its start, the expected tracking cost is a
//! quadratic in `u`, the misidentification bound is a sum of Gaussian Bhattacharyya
//! coefficients whose exponents are quadratic in `u`, and the expectational constraints
//! are linear in `u`.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{output_covariance, state_covariance, LinearGaussianSystem, ModeSet};
use crate::scalar::{lit, relative_asymmetry, symmetrize, to_f64, Real};

/// `gain · u + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap<T: Real> {
    pub gain: DMatrix<T>,
    pub offset: DVector<T>,
}

impl<T: Real> AffineMap<T> {
    pub fn apply(&self, u: &DVector<T>) -> DVector<T> {
        &self.gain * u + &self.offset
    }
}

/// Stacked mean state `x̄_{0:N}` as an affine function of `u_{0:N-1}` for input matrix `b_mode`.
pub fn state_mean_map<T: Real>(
    sys: &LinearGaussianSystem<T>,
    b_mode: &DMatrix<T>,
    horizon: usize,
) -> AffineMap<T> {
    let (n, p) = (sys.n(), sys.p());
    let mut gain = DMatrix::zeros(n * (horizon + 1), p * horizon);
    let mut offset = DVector::zeros(n * (horizon + 1));
    let mut a_pow_x0 = sys.x0_mean().clone();
    // powers[j] = A^j B_μ
    let mut powers = Vec::with_capacity(horizon);
    let mut ab = b_mode.clone();
    for _ in 0..horizon {
        powers.push(ab.clone());
        ab = sys.a() * ab;
    }
    for k in 0..=horizon {
        if k > 0 {
            a_pow_x0 = sys.a() * a_pow_x0;
        }
        offset.rows_mut(k * n, n).copy_from(&a_pow_x0);
        for j in 0..k {
            gain.view_mut((k * n, j * p), (n, p)).copy_from(&powers[k - 1 - j]);
        }
    }
    AffineMap { gain, offset }
}

/// Stacked mean output `ȳ_{0:N}` as an affine function of `u_{0:N-1}`.
pub fn output_mean_map<T: Real>(
    sys: &LinearGaussianSystem<T>,
    b_mode: &DMatrix<T>,
    horizon: usize,
) -> AffineMap<T> {
    let x = state_mean_map(sys, b_mode, horizon);
    let (n, m) = (sys.n(), sys.m());
    let mut gain = DMatrix::zeros(m * (horizon + 1), x.gain.ncols());
    let mut offset = DVector::zeros(m * (horizon + 1));
    for k in 0..=horizon {
        gain.rows_mut(k * m, m)
            .copy_from(&(sys.c() * x.gain.rows(k * n, n)));
        offset.rows_mut(k * m, m)
            .copy_from(&(sys.c() * x.offset.rows(k * n, n)));
    }
    AffineMap { gain, offset }
}

fn block_diag<T: Real>(block: &DMatrix<T>, count: usize) -> DMatrix<T> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or(T::one()), |a, b| a.min(b))
}

/// Tracking weight `Q` and effort weight `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlWeights<T: Real> {
    q: DMatrix<T>,
    r: DMatrix<T>,
}

impl<T: Real> ControlWeights<T> {
    /// Requires `Q` symmetric PSD and `R` symmetric positive definite.
    pub fn new(q: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        let w = Self::evaluation_only(q, r)?;
        let r_min = min_eigenvalue(&w.r);
        if r_min <= T::zero() {
            return Err(Error::invalid("R must be positive definite"));
        }
        Ok(w)
    }

    /// Accepts a PSD `R`. The resulting form can be evaluated but its Hessian may be singular.
    pub fn evaluation_only(q: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::invalid("Q and R must be square"));
        }
        for (name, m) in [("Q", &q), ("R", &r)] {
            if relative_asymmetry(m) > lit(1e-12) {
                return Err(Error::invalid(format!("{name} must be symmetric")));
            }
            let floor = -lit::<T>(1e-10) * m.trace().abs();
            if !m.is_empty() && min_eigenvalue(m) < floor {
                return Err(Error::invalid(format!("{name} must be positive semi-definite")));
            }
        }
        Ok(Self { q, r })
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }
}

/// `J_c(u) = uᵀ Φ u + ψᵀ u + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlObjectiveForm<T: Real> {
    pub phi: DMatrix<T>,
    pub psi: DVector<T>,
    pub c0: T,
    /// `Σ_i P(μ_i) Σ_k Tr(Q H_y(k,k))`, the part of `c0` no input can change.
    pub noise_floor: T,
}

impl<T: Real> ControlObjectiveForm<T> {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn eval(&self, u: &DVector<T>) -> T {
        (&self.phi * u).dot(u) + self.psi.dot(u) + self.c0
    }

    pub fn gradient(&self, u: &DVector<T>) -> DVector<T> {
        (&self.phi + self.phi.transpose()) * u + &self.psi
    }
}

pub fn eval_control_objective<T: Real>(form: &ControlObjectiveForm<T>, u: &DVector<T>) -> T {
    form.eval(u)
}

pub fn control_objective_gradient<T: Real>(form: &ControlObjectiveForm<T>, u: &DVector<T>) -> DVector<T> {
    form.gradient(u)
}

fn check_reference<T: Real>(sys: &LinearGaussianSystem<T>, reference: &DVector<T>, horizon: usize) -> Result<()> {
    if reference.len() != sys.m() * (horizon + 1) {
        return Err(Error::invalid(format!(
            "reference must have length m(N+1) = {}, got {}",
            sys.m() * (horizon + 1),
            reference.len()
        )));
    }
    Ok(())
}

/// Expected tracking-plus-effort cost over one window as an explicit quadratic in `u`.
///
/// `reference` stacks `r_0..r_N`.
pub fn build_control_objective<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    reference: &DVector<T>,
    weights: &ControlWeights<T>,
    horizon: usize,
) -> Result<ControlObjectiveForm<T>> {
    check_reference(sys, reference, horizon)?;
    let (m, p) = (sys.m(), sys.p());
    if weights.q.nrows() != m || weights.r.nrows() != p {
        return Err(Error::invalid(format!("Q must be {m}x{m} and R must be {p}x{p}")));
    }
    let q_big = block_diag(&weights.q, horizon + 1);
    let dim = p * horizon;
    let mut phi = block_diag(&weights.r, horizon);
    let mut psi = DVector::zeros(dim);
    let mut c0 = T::zero();
    for mode in modes.iter().filter(|md| md.prior > T::zero()) {
        let map = output_mean_map(sys, mode.input_matrix, horizon);
        let resid = &map.offset - reference;
        let qg = &q_big * &map.gain;
        phi += map.gain.transpose() * &qg * mode.prior;
        psi += qg.transpose() * &resid * (lit::<T>(2.0) * mode.prior);
        c0 += (&q_big * &resid).dot(&resid) * mode.prior;
    }
    let x_cov = state_covariance(sys, horizon);
    let y_cov = output_covariance(sys, &x_cov, horizon);
    let noise_floor = (&q_big * &y_cov).trace() * modes.priors().sum();
    Ok(ControlObjectiveForm {
        phi: symmetrize(&phi),
        psi,
        c0: c0 + noise_floor,
        noise_floor,
    })
}

/// Terms for one ordered mode pair `i < j` of the detection bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTerm<T: Real> {
    pub i: usize,
    pub j: usize,
    /// `√(P(μ_i) P(μ_j))`.
    pub weight: T,
    /// `u ↦ ȳ_{μ_j} − ȳ_{μ_i}`.
    pub delta: AffineMap<T>,
    /// `(H_{y|μ_i} + H_{y|μ_j})⁻¹`.
    pub w: DMatrix<T>,
    /// `½ ln(det((H_i+H_j)/2) / √(det H_i det H_j))`.
    pub logdet: T,
    curvature: DMatrix<T>,
    linear: DVector<T>,
    constant: T,
}

impl<T: Real> PairTerm<T> {
    /// Bhattacharyya distance `φ_ij(u)`.
    pub fn phi(&self, u: &DVector<T>) -> T {
        let quad = (&self.curvature * u).dot(u) + lit::<T>(2.0) * self.linear.dot(u) + self.constant;
        lit::<T>(0.25) * quad.max(T::zero()) + self.logdet
    }

    pub fn phi_gradient(&self, u: &DVector<T>) -> DVector<T> {
        (&self.curvature * u + &self.linear) * lit::<T>(0.5)
    }

    /// `φ_ij(u)` and its gradient from one product with the curvature.
    fn phi_with_gradient(&self, u: &DVector<T>) -> (T, DVector<T>) {
        let mut g = &self.curvature * u;
        let quad = g.dot(u) + lit::<T>(2.0) * self.linear.dot(u) + self.constant;
        g += &self.linear;
        g *= lit::<T>(0.5);
        (lit::<T>(0.25) * quad.max(T::zero()) + self.logdet, g)
    }

    /// `Dᵀ W D`, the Hessian of `4 φ_ij`.
    pub fn curvature(&self) -> &DMatrix<T> {
        &self.curvature
    }
}

/// Upper bound `Ĵ_d(u) = Σ_{i<j} √(P_i P_j) e^{−φ_ij(u)}` on the misidentification probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBoundForm<T: Real> {
    pub pairs: Vec<PairTerm<T>>,
    dim: usize,
}

impl<T: Real> DetectionBoundForm<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Σ_{i<j} √(P_i P_j)`, the value at any input that leaves all mean outputs equal.
    pub fn ceiling(&self) -> T {
        self.pairs.iter().fold(T::zero(), |acc, p| acc + p.weight)
    }

    pub fn eval(&self, u: &DVector<T>) -> T {
        self.pairs
            .iter()
            .fold(T::zero(), |acc, p| acc + p.weight * (-p.phi(u)).exp())
    }

    pub fn gradient(&self, u: &DVector<T>) -> DVector<T> {
        let mut g = DVector::zeros(self.dim);
        for p in &self.pairs {
            let (phi, grad) = p.phi_with_gradient(u);
            g.axpy(-p.weight * (-phi).exp(), &grad, T::one());
        }
        g
    }

    /// Gauss-Newton curvature `Σ s_ij ∇φ_ij ∇φ_ijᵀ`; PSD approximation of the bound's Hessian.
    pub fn gauss_newton(&self, u: &DVector<T>) -> DMatrix<T> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for p in &self.pairs {
            let (phi, g) = p.phi_with_gradient(u);
            h.ger(p.weight * (-phi).exp(), &g, &g, T::one());
        }
        h
    }
}

pub fn eval_detection_bound<T: Real>(form: &DetectionBoundForm<T>, u: &DVector<T>) -> T {
    form.eval(u)
}

pub fn detection_bound_gradient<T: Real>(form: &DetectionBoundForm<T>, u: &DVector<T>) -> DVector<T> {
    form.gradient(u)
}

fn log_det<T: Real>(chol: &Cholesky<T, nalgebra::Dyn>) -> T {
    chol.l().diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * lit::<T>(2.0)
}

/// Detection bound for the window starting at the system's initial belief.
pub fn build_detection_bound<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    horizon: usize,
) -> Result<DetectionBoundForm<T>> {
    let x_cov = state_covariance(sys, horizon);
    let y_cov = output_covariance(sys, &x_cov, horizon);
    // state covariance carries no B_μ term, so every mode shares one output covariance
    let covs = vec![y_cov; modes.len()];
    build_detection_bound_with_covariances(sys, modes, horizon, &covs)
}

/// Detection bound with explicit per-mode output covariances.
pub fn build_detection_bound_with_covariances<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    horizon: usize,
    covs: &[DMatrix<T>],
) -> Result<DetectionBoundForm<T>> {
    if covs.len() != modes.len() {
        return Err(Error::invalid("one output covariance per mode is required"));
    }
    // identical covariances share factorizations
    let mut ids = Vec::with_capacity(covs.len());
    let mut uniq: Vec<usize> = Vec::new();
    for (i, c) in covs.iter().enumerate() {
        match uniq.iter().find(|&&u| covs[u] == *c) {
            Some(&u) => ids.push(u),
            None => {
                uniq.push(i);
                ids.push(i);
            }
        }
    }
    let mut logdets: HashMap<usize, T> = HashMap::new();
    for &u in &uniq {
        let chol = Cholesky::new(symmetrize(&covs[u])).ok_or_else(|| {
            Error::Factorization(format!("output covariance of mode {u} is not positive definite"))
        })?;
        logdets.insert(u, log_det(&chol));
    }
    let mut pair_cache: HashMap<(usize, usize), (DMatrix<T>, T)> = HashMap::new();
    let means: Vec<AffineMap<T>> = modes
        .iter()
        .map(|md| output_mean_map(sys, md.input_matrix, horizon))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..modes.len() {
        for j in (i + 1)..modes.len() {
            let key = (ids[i].min(ids[j]), ids[i].max(ids[j]));
            if !pair_cache.contains_key(&key) {
                let sum = &covs[i] + &covs[j];
                let chol = Cholesky::new(symmetrize(&sum)).ok_or_else(|| {
                    Error::Factorization(format!("H_{i} + H_{j} is not positive definite"))
                })?;
                let dim = sum.nrows();
                let w = symmetrize(&chol.solve(&DMatrix::identity(dim, dim)));
                let half_sum_logdet = log_det(&chol) - lit::<T>(dim as f64) * lit::<T>(2.0).ln();
                let ld = lit::<T>(0.5) * (half_sum_logdet - lit::<T>(0.5) * (logdets[&ids[i]] + logdets[&ids[j]]));
                pair_cache.insert(key, (w, ld.max(T::zero())));
            }
            let (w, logdet) = pair_cache[&key].clone();
            let delta = AffineMap {
                gain: &means[j].gain - &means[i].gain,
                offset: &means[j].offset - &means[i].offset,
            };
            let wd = &w * &delta.gain;
            let curvature = symmetrize(&(delta.gain.transpose() * &wd));
            let linear = wd.transpose() * &delta.offset;
            let constant = (&w * &delta.offset).dot(&delta.offset);
            pairs.push(PairTerm {
                i,
                j,
                weight: (modes.priors()[i] * modes.priors()[j]).sqrt(),
                delta,
                w,
                logdet,
                curvature,
                linear,
                constant,
            });
        }
    }
    Ok(DetectionBoundForm { pairs, dim: sys.p() * horizon })
}

/// Which mode, step and constraint row produced a stacked constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTag {
    pub mode: usize,
    pub step: usize,
    pub row: usize,
}

/// `M u ≤ b` over every mode and every step `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedConstraints<T: Real> {
    pub m: DMatrix<T>,
    pub b: DVector<T>,
    pub tags: Vec<ConstraintTag>,
}

impl<T: Real> ExpandedConstraints<T> {
    /// No constraints on `dim` decision variables.
    pub fn none(dim: usize) -> Self {
        Self { m: DMatrix::zeros(0, dim), b: DVector::zeros(0), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    /// `max_r (M u − b)_r⁺`.
    pub fn max_violation(&self, u: &DVector<T>) -> T {
        if self.is_empty() {
            return T::zero();
        }
        (&self.m * u - &self.b)
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v))
    }
}

/// Linear constraints `G_x x + G_u u ≤ g` on the expected state, expanded over modes and steps.
///
/// At step `N` there is no decision variable `u_N`, so the `G_u` term is omitted there.
pub fn expand_constraints<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    gx: &DMatrix<T>,
    gu: &DMatrix<T>,
    g: &DVector<T>,
    horizon: usize,
) -> Result<ExpandedConstraints<T>> {
    let (n, p) = (sys.n(), sys.p());
    let nc = g.len();
    if gx.shape() != (nc, n) || gu.shape() != (nc, p) {
        return Err(Error::invalid(format!(
            "Gx must be {nc}x{n} and Gu {nc}x{p}, got {:?} and {:?}",
            gx.shape(),
            gu.shape()
        )));
    }
    let rows = nc * (horizon + 1) * modes.len();
    let dim = p * horizon;
    let mut m = DMatrix::zeros(rows, dim);
    let mut b = DVector::zeros(rows);
    let mut tags = Vec::with_capacity(rows);
    let mut r = 0;
    for mode in modes.iter() {
        let map = state_mean_map(sys, mode.input_matrix, horizon);
        for k in 0..=horizon {
            let coeff = gx * map.gain.rows(k * n, n);
            let bound = g - gx * map.offset.rows(k * n, n);
            m.rows_mut(r, nc).copy_from(&coeff);
            if k < horizon {
                let mut blk = m.view_mut((r, k * p), (nc, p));
                blk += gu;
            }
            b.rows_mut(r, nc).copy_from(&bound);
            for row in 0..nc {
                tags.push(ConstraintTag { mode: mode.index, step: k, row });
            }
            r += nc;
        }
    }
    Ok(ExpandedConstraints { m, b, tags })
}

/// Alternative constants obtained from the closed-form cost coefficients exactly as typeset
/// in the source derivation, kept for side-by-side diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct TypesetReading<T: Real> {
    /// Constant term with the reference cross term entering as `+Σ P r_kᵀ Q C A^k x̄_0`.
    pub c0: T,
    /// Linear term with `Q` (instead of `CᵀQC`) between `(A^k)ᵀ` and the input blocks; only
    /// defined when the state and output dimensions agree.
    pub psi: Option<DVector<T>>,
}

pub fn typeset_reading<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    reference: &DVector<T>,
    weights: &ControlWeights<T>,
    horizon: usize,
) -> Result<TypesetReading<T>> {
    let form = build_control_objective(sys, modes, reference, weights, horizon)?;
    let (n, m) = (sys.n(), sys.m());
    let q = weights.q();
    let mut implemented_cross = T::zero();
    let mut printed_cross = T::zero();
    let mut psi = (n == m).then(|| DVector::zeros(form.dim()));
    for mode in modes.iter() {
        let xmap = state_mean_map(sys, mode.input_matrix, horizon);
        for k in 0..=horizon {
            let ax0 = xmap.offset.rows(k * n, n).into_owned();
            let rk = reference.rows(k * m, m).into_owned();
            let cross = (q * sys.c() * &ax0).dot(&rk) * mode.prior;
            implemented_cross -= cross * lit::<T>(2.0);
            printed_cross += cross;
            if let Some(psi) = psi.as_mut() {
                let gain_k = xmap.gain.rows(k * n, n);
                let first = gain_k.transpose() * (q * &ax0) * (lit::<T>(2.0) * mode.prior);
                let second = (sys.c() * gain_k).transpose() * (q * &rk) * (lit::<T>(2.0) * mode.prior);
                *psi += first - second;
            }
        }
    }
    Ok(TypesetReading { c0: form.c0 - implemented_cross + printed_cross, psi })
}

/// Row-major export of a control form and its typeset alternative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveDiagnostics {
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub c0: f64,
    pub noise_floor: f64,
    pub typeset_c0: f64,
    pub typeset_psi: Option<Vec<f64>>,
    pub detection_pairs: Vec<PairDiagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub logdet: f64,
    pub delta_gain: Vec<Vec<f64>>,
    pub delta_offset: Vec<f64>,
}

pub(crate) fn rows_of<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().map(|&v| to_f64(v)).collect()).collect()
}

pub(crate) fn vec_of<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|&x| to_f64(x)).collect()
}

impl ObjectiveDiagnostics {
    pub fn new<T: Real>(
        control: &ControlObjectiveForm<T>,
        detection: &DetectionBoundForm<T>,
        typeset: &TypesetReading<T>,
    ) -> Self {
        Self {
            phi: rows_of(&control.phi),
            psi: vec_of(&control.psi),
            c0: to_f64(control.c0),
            noise_floor: to_f64(control.noise_floor),
            typeset_c0: to_f64(typeset.c0),
            typeset_psi: typeset.psi.as_ref().map(vec_of),
            detection_pairs: detection
                .pairs
                .iter()
                .map(|p| PairDiagnostics {
                    i: p.i,
                    j: p.j,
                    weight: to_f64(p.weight),
                    logdet: to_f64(p.logdet),
                    delta_gain: rows_of(&p.delta.gain),
                    delta_offset: vec_of(&p.delta.offset),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::enumerate_modes;
    use nalgebra::{dmatrix, dvector};

    fn scalar(hx00: f64, hw: f64, hv: f64, x0: f64) -> LinearGaussianSystem<f64> {
        LinearGaussianSystem::new(
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![hw],
            dmatrix![hv],
            dvector![x0],
            dmatrix![hx00],
        )
        .unwrap()
    }

    #[test]
    fn pure_effort_cost() {
        let sys = scalar(0.0, 0.0, 0.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![1.0, 0.0]).unwrap();
        let w = ControlWeights::new(dmatrix![0.0], dmatrix![1.0]).unwrap();
        let form = build_control_objective(&sys, &modes, &DVector::zeros(3), &w, 2).unwrap();
        assert!((form.eval(&dvector![1.0, 2.0]) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn only_trace_term_survives() {
        let sys = scalar(1.0, 0.0, 0.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![1.0, 0.0]).unwrap();
        let w = ControlWeights::evaluation_only(dmatrix![1.0], dmatrix![0.0]).unwrap();
        let form = build_control_objective(&sys, &modes, &DVector::zeros(2), &w, 1).unwrap();
        assert!((form.eval(&dvector![0.0]) - 2.0).abs() < 1e-14);
        assert!(ControlWeights::new(dmatrix![1.0], dmatrix![0.0]).is_err());
        assert!(ControlWeights::new(dmatrix![-1.0], dmatrix![1.0]).is_err());
    }

    #[test]
    fn quadratic_arithmetic() {
        let form = ControlObjectiveForm {
            phi: DMatrix::identity(2, 2),
            psi: DVector::zeros(2),
            c0: 0.0,
            noise_floor: 0.0,
        };
        assert_eq!(eval_control_objective(&form, &dvector![3.0, 4.0]), 25.0);
        assert_eq!(control_objective_gradient(&form, &dvector![3.0, 4.0]), dvector![6.0, 8.0]);
    }

    #[test]
    fn identical_modes_give_weight_sum() {
        // B = 0 makes every mask produce the same input matrix
        let sys = LinearGaussianSystem::<f64>::new(
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![0.1],
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0],
        )
        .unwrap();
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        let form = build_detection_bound(&sys, &modes, 3).unwrap();
        assert!((form.eval(&dvector![1.0, -2.0, 5.0]) - 0.5).abs() < 1e-14);
        assert_eq!(form.pairs[0].logdet, 0.0);
    }

    #[test]
    fn scalar_pair_arithmetic() {
        // one step with deterministic x_0: Δȳ_1 = u_0 = 2, H_y(1,1) = Hw + Hv = 2, no cross block
        let sys = scalar(0.0, 1.0, 1.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        let form = build_detection_bound(&sys, &modes, 1).unwrap();
        let u = dvector![2.0];
        assert_eq!(form.pairs[0].delta.apply(&u), dvector![0.0, -2.0]);
        assert!((form.pairs[0].phi(&u) - 0.25).abs() < 1e-12);
        assert!((form.eval(&u) - 0.5 * (-0.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn unequal_covariances_give_positive_logdet() {
        let sys = scalar(1.0, 0.0, 1.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        let covs = vec![dmatrix![1.0, 0.0; 0.0, 1.0], dmatrix![4.0, 0.0; 0.0, 1.0]];
        let form = build_detection_bound_with_covariances(&sys, &modes, 1, &covs).unwrap();
        // ½ ln((2.5·1)/√(4·1)) = ½ ln 1.25
        assert!((form.pairs[0].logdet - 0.5 * 1.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_rejected() {
        let sys = scalar(0.0, 0.0, 0.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        assert!(matches!(build_detection_bound(&sys, &modes, 2), Err(Error::Factorization(_))));
    }

    #[test]
    fn state_constraint_row() {
        let sys = scalar(0.0, 0.0, 0.0, 6.6);
        let modes = ModeSet::from_masks(sys.b(), vec![vec![false]], dvector![1.0]).unwrap();
        let c = expand_constraints(&sys, &modes, &dmatrix![1.0], &dmatrix![0.0], &dvector![15.0], 1).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.tags[1], ConstraintTag { mode: 0, step: 1, row: 0 });
        assert_eq!(c.m[(1, 0)], 1.0);
        assert!((c.b[1] - 8.4).abs() < 1e-12);
        assert_eq!(c.m[(0, 0)], 0.0);
    }

    #[test]
    fn input_only_constraints_touch_one_block() {
        let sys = LinearGaussianSystem::new(
            dmatrix![1.0, 0.0; 0.0, 1.0],
            dmatrix![1.0, 0.0; 0.0, 1.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            dvector![0.0, 0.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let modes = enumerate_modes(sys.b(), &DVector::from_element(4, 0.25)).unwrap();
        let gu = -DMatrix::<f64>::identity(2, 2);
        let c = expand_constraints(&sys, &modes, &DMatrix::zeros(2, 2), &gu, &dvector![0.0, 0.0], 3).unwrap();
        assert_eq!(c.len(), 2 * 4 * 4);
        for (r, tag) in c.tags.iter().enumerate() {
            let nonzero: Vec<usize> = (0..6).filter(|&col| c.m[(r, col)] != 0.0).collect();
            if tag.step < 3 {
                assert_eq!(nonzero, vec![tag.step * 2 + tag.row]);
            } else {
                assert!(nonzero.is_empty());
            }
        }
    }

    #[test]
    fn masked_inputs_have_no_effect_in_their_mode() {
        let sys = LinearGaussianSystem::new(
            dmatrix![1.0],
            dmatrix![1.0, 2.0],
            dmatrix![1.0],
            dmatrix![0.1],
            dmatrix![0.1],
            dvector![0.0],
            dmatrix![0.1],
        )
        .unwrap();
        let modes = enumerate_modes(sys.b(), &DVector::from_element(4, 0.25)).unwrap();
        let c = expand_constraints(&sys, &modes, &dmatrix![1.0], &dmatrix![0.0, 0.0], &dvector![1.0], 2).unwrap();
        for (r, tag) in c.tags.iter().enumerate() {
            for (j, &attacked) in modes.masks()[tag.mode].iter().enumerate() {
                if attacked {
                    assert_eq!(c.m[(r, j)], 0.0);
                    assert_eq!(c.m[(r, 2 + j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let sys = scalar(0.0, 0.0, 1.0, 0.0);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        assert!(expand_constraints(&sys, &modes, &dmatrix![1.0, 1.0], &dmatrix![0.0], &dvector![1.0], 1).is_err());
        let w = ControlWeights::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        assert!(build_control_objective(&sys, &modes, &DVector::zeros(5), &w, 1).is_err());
    }
}
