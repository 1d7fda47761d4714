//! Dense convex quadratic programming.
//!
//! Problems have the form `min ½ xᵀ G x + aᵀ x  s.t.  M x ≤ b` with `G` positive definite.
//! [`solve_dual`] is the Goldfarb-Idnani dual active-set method: it needs no feasible start and
//! certifies infeasibility. [`PrimalActiveSet`] starts from a feasible point and reuses a working
//! set, which makes it cheap inside sequential-QP loops.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::scalar::{lit, Real};

/// Linear inequalities `M x ≤ b` with zero rows removed, rows scaled to unit norm and
/// exact duplicates merged.
#[derive(Debug, Clone)]
pub struct Polytope<T: Real> {
    rows: DMatrix<T>,
    rhs: DVector<T>,
    /// Original row index and norm for every kept row.
    origin: Vec<(usize, T)>,
    original_len: usize,
    /// A zero row with a negative bound was present.
    trivially_infeasible: Option<usize>,
}

impl<T: Real> Polytope<T> {
    pub fn new(m: &DMatrix<T>, b: &DVector<T>) -> Self {
        let dim = m.ncols();
        let mut kept: Vec<(DVector<T>, T, usize, T)> = Vec::new();
        let mut trivially_infeasible = None;
        let tiny: T = lit(1e-14);
        for i in 0..m.nrows() {
            let row = m.row(i).transpose();
            let norm = row.norm();
            if norm <= tiny {
                if b[i] < -lit::<T>(1e-12) && trivially_infeasible.is_none() {
                    trivially_infeasible = Some(i);
                }
                continue;
            }
            let unit = row / norm;
            let rhs = b[i] / norm;
            if let Some(existing) = kept.iter_mut().find(|(r, _, _, _)| *r == unit) {
                if rhs < existing.1 {
                    existing.1 = rhs;
                    existing.2 = i;
                    existing.3 = norm;
                }
                continue;
            }
            kept.push((unit, rhs, i, norm));
        }
        let mut rows = DMatrix::zeros(kept.len(), dim);
        let mut rhs = DVector::zeros(kept.len());
        let mut origin = Vec::with_capacity(kept.len());
        for (r, (unit, bound, idx, norm)) in kept.into_iter().enumerate() {
            rows.row_mut(r).copy_from(&unit.transpose());
            rhs[r] = bound;
            origin.push((idx, norm));
        }
        Self { rows, rhs, origin, original_len: m.nrows(), trivially_infeasible }
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<T> {
        &self.rows
    }

    pub fn rhs(&self) -> &DVector<T> {
        &self.rhs
    }

    /// Scaled slacks `b − M x` of the kept rows.
    pub fn slacks(&self, x: &DVector<T>) -> DVector<T> {
        &self.rhs - &self.rows * x
    }

    /// Maps multipliers of the kept rows back onto the original rows.
    pub fn expand_multipliers(&self, lambda: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.original_len);
        for (r, &(idx, norm)) in self.origin.iter().enumerate() {
            out[idx] = lambda[r] / norm;
        }
        out
    }

    pub fn trivially_infeasible(&self) -> Option<usize> {
        self.trivially_infeasible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    /// Multipliers of the original rows (`λ ≥ 0`, `G x + a + Mᵀ λ = 0` at optimality).
    pub multipliers: DVector<T>,
    pub status: QpStatus,
    pub iterations: usize,
    /// For infeasible problems: `y ≥ 0` with `Mᵀ y ≈ 0` and `bᵀ y < 0`.
    pub certificate: Option<DVector<T>>,
}

/// KKT residual of `(x, λ)`: the largest of stationarity, primal violation,
/// dual sign violation and complementarity.
pub fn kkt_residual<T: Real>(
    g: &DMatrix<T>,
    a: &DVector<T>,
    m: &DMatrix<T>,
    b: &DVector<T>,
    x: &DVector<T>,
    lambda: &DVector<T>,
) -> T {
    let stat = (g * x + a + m.transpose() * lambda).amax();
    let slack = b - m * x;
    let mut worst = stat;
    for i in 0..b.len() {
        worst = worst.max((-slack[i]).max(T::zero()));
        worst = worst.max((-lambda[i]).max(T::zero()));
        worst = worst.max((lambda[i] * slack[i]).abs());
    }
    worst
}

/// Goldfarb-Idnani dual active-set method.
pub fn solve_dual<T: Real>(
    g: &DMatrix<T>,
    a: &DVector<T>,
    poly: &Polytope<T>,
    max_iter: usize,
) -> Option<QpSolution<T>> {
    let chol = Cholesky::new(g.clone())?;
    Some(DualSolver::new(chol, poly).run(a, max_iter))
}

struct DualSolver<'a, T: Real> {
    chol: Cholesky<T, Dyn>,
    poly: &'a Polytope<T>,
}

impl<'a, T: Real> DualSolver<'a, T> {
    fn new(chol: Cholesky<T, Dyn>, poly: &'a Polytope<T>) -> Self {
        Self { chol, poly }
    }

    fn l_solve(&self, v: &DVector<T>) -> DVector<T> {
        self.chol.l().solve_lower_triangular(v).expect("Cholesky factor is invertible")
    }

    fn lt_solve(&self, v: &DVector<T>) -> DVector<T> {
        self.chol
            .l()
            .tr_solve_lower_triangular(v)
            .expect("Cholesky factor is invertible")
    }

    fn run(&self, a: &DVector<T>, max_iter: usize) -> QpSolution<T> {
        let poly = self.poly;
        let dim = poly.dim();
        let mut x = -self.chol.solve(a);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<T> = Vec::new();
        // columns L⁻¹ n_j of active normals, n_j = −m_j
        let mut nd: Vec<DVector<T>> = Vec::new();
        let feas_tol: T = lit(1e-12);
        let zero_tol: T = lit(1e-12);
        let mut iterations = 0;

        if let Some(row) = poly.trivially_infeasible() {
            let mut cert = DVector::zeros(poly.original_len);
            cert[row] = T::one();
            return QpSolution {
                x,
                multipliers: DVector::zeros(poly.original_len),
                status: QpStatus::Infeasible,
                iterations,
                certificate: Some(cert),
            };
        }

        loop {
            // most violated constraint
            let slack = poly.slacks(&x);
            let mut p = None;
            let mut worst = -feas_tol * (T::one() + x.amax());
            for i in 0..poly.len() {
                if slack[i] < worst && !active.contains(&i) {
                    worst = slack[i];
                    p = Some(i);
                }
            }
            let Some(p) = p else {
                return self.finish(x, &active, &u, QpStatus::Optimal, iterations);
            };
            let n_plus: DVector<T> = -poly.rows().row(p).transpose();
            let rhs_plus = -poly.rhs()[p];
            let d = self.l_solve(&n_plus);
            let mut u_plus = T::zero();

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return self.finish(x, &active, &u, QpStatus::MaxIterations, iterations);
                }
                let q = active.len();
                let (z_dir, r) = if q == 0 {
                    (d.clone(), DVector::zeros(0))
                } else {
                    let mut ndm = DMatrix::zeros(dim, q);
                    for (j, col) in nd.iter().enumerate() {
                        ndm.set_column(j, col);
                    }
                    let qr = ndm.clone().qr();
                    let qt_d = qr.q().transpose() * &d;
                    let r = qr
                        .r()
                        .solve_upper_triangular(&qt_d)
                        .unwrap_or_else(|| DVector::zeros(q));
                    (&d - &ndm * &r, r)
                };
                let z = self.lt_solve(&z_dir);
                let z_null = z_dir.norm() <= zero_tol * (T::one() + d.norm());

                // partial step: largest dual step keeping active multipliers non-negative
                let mut t1: Option<(T, usize)> = None;
                for j in 0..q {
                    if r[j] > zero_tol {
                        let ratio = u[j] / r[j];
                        if t1.map_or(true, |(t, _)| ratio < t) {
                            t1 = Some((ratio, j));
                        }
                    }
                }
                // full step: makes constraint p active
                let t2 = if z_null {
                    None
                } else {
                    let s_p = n_plus.dot(&x) - rhs_plus;
                    Some(-s_p / z.dot(&n_plus))
                };
                match (t1, t2) {
                    (None, None) => {
                        // n⁺ is a non-positive combination of active normals
                        let mut y = DVector::zeros(poly.len());
                        y[p] = T::one();
                        for (j, &idx) in active.iter().enumerate() {
                            y[idx] = -r[j];
                        }
                        let cert = poly.expand_multipliers(&y);
                        let mut sol = self.finish(x, &active, &u, QpStatus::Infeasible, iterations);
                        sol.certificate = Some(cert);
                        return sol;
                    }
                    (Some((t, k)), None) => {
                        for j in 0..q {
                            u[j] -= t * r[j];
                        }
                        u_plus += t;
                        active.remove(k);
                        u.remove(k);
                        nd.remove(k);
                    }
                    (t1, Some(t2)) => {
                        let (t, drop) = match t1 {
                            Some((t1, k)) if t1 < t2 => (t1, Some(k)),
                            _ => (t2, None),
                        };
                        x += &z * t;
                        for j in 0..q {
                            u[j] -= t * r[j];
                        }
                        u_plus += t;
                        match drop {
                            None => {
                                active.push(p);
                                u.push(u_plus);
                                nd.push(d.clone());
                                break;
                            }
                            Some(k) => {
                                active.remove(k);
                                u.remove(k);
                                nd.remove(k);
                            }
                        }
                    }
                }
            }
        }
    }

    fn finish(
        &self,
        x: DVector<T>,
        active: &[usize],
        u: &[T],
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution<T> {
        let mut lambda = DVector::zeros(self.poly.len());
        for (&idx, &uj) in active.iter().zip(u) {
            lambda[idx] = uj.max(T::zero());
        }
        QpSolution {
            x,
            multipliers: self.poly.expand_multipliers(&lambda),
            status,
            iterations,
            certificate: None,
        }
    }
}

/// Euclidean projection onto the polytope, or `None` when it is empty.
pub fn project<T: Real>(poly: &Polytope<T>, z: &DVector<T>) -> Option<DVector<T>> {
    let dim = z.len();
    let sol = solve_dual(&DMatrix::identity(dim, dim), &(-z), poly, 50 * (poly.len() + dim + 1))?;
    (sol.status == QpStatus::Optimal).then_some(sol.x)
}

/// Primal active-set method warm-started from a feasible point and a working set.
#[derive(Debug, Clone, Default)]
pub struct PrimalActiveSet {
    working: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PrimalStep<T: Real> {
    pub x: DVector<T>,
    pub converged: bool,
    pub iterations: usize,
}

impl PrimalActiveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn working_set(&self) -> &[usize] {
        &self.working
    }

    /// Minimizes `½ xᵀ G x + aᵀ x` over the polytope starting at the feasible `x0`.
    pub fn solve<T: Real>(
        &mut self,
        g: &DMatrix<T>,
        a: &DVector<T>,
        poly: &Polytope<T>,
        x0: &DVector<T>,
        max_iter: usize,
    ) -> Option<PrimalStep<T>> {
        let chol = Cholesky::new(g.clone())?;
        let dim = x0.len();
        let mut x = x0.clone();
        let act_tol: T = lit(1e-10);
        let slack = poly.slacks(&x);
        let candidates: Vec<usize> = self
            .working
            .iter()
            .copied()
            .filter(|&i| i < poly.len() && slack[i].abs() <= act_tol * (T::one() + x.amax()))
            .collect();
        self.working.clear();
        let mut basis: Vec<DVector<T>> = Vec::new();
        for i in candidates {
            if admit(&mut basis, poly.rows().row(i).transpose()) {
                self.working.push(i);
            }
        }
        let mut at_minimum = false;
        let mut dependent: Vec<usize> = Vec::new();
        // `L⁻¹ aᵢ` per row, computed on first use
        let mut whitened: Vec<Option<DVector<T>>> = vec![None; poly.len()];
        let mut in_working = vec![false; poly.len()];
        for iteration in 1..=max_iter {
            let q = self.working.len();
            let c = g * &x + a;
            let w = chol.l().solve_lower_triangular(&c).expect("invertible factor");
            let (p, lambda) = if q == 0 {
                (-chol.l().tr_solve_lower_triangular(&w).expect("invertible factor"), DVector::zeros(0))
            } else {
                let mut y = DMatrix::zeros(dim, q);
                for (j, &i) in self.working.iter().enumerate() {
                    let col = whitened[i].get_or_insert_with(|| {
                        chol.l().solve_lower_triangular(&poly.rows().row(i).transpose()).expect("invertible factor")
                    });
                    y.set_column(j, col);
                }
                let qr = y.clone().qr();
                let mut qtw = w.clone();
                qr.q_tr_mul(&mut qtw);
                let lambda = -qr
                    .r()
                    .solve_upper_triangular(&qtw.rows(0, q).into_owned())
                    .unwrap_or_else(|| DVector::zeros(q));
                let p = -chol
                    .l()
                    .tr_solve_lower_triangular(&(&w + &y * &lambda))
                    .expect("invertible factor");
                (p, lambda)
            };
            if at_minimum || p.amax() <= lit::<T>(1e-13) * (T::one() + x.amax()) {
                let most_negative = lambda
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l < -lit::<T>(1e-9) * lambda.amax().max(lit(1e-300)))
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap());
                match most_negative {
                    None => return Some(PrimalStep { x, converged: true, iterations: iteration }),
                    Some((j, _)) => {
                        self.working.remove(j);
                        basis = orthonormal_basis(poly, &self.working);
                        at_minimum = false;
                        dependent.clear();
                        continue;
                    }
                }
            }
            let ap = poly.rows() * &p;
            let slack = poly.slacks(&x);
            let mut alpha = T::one();
            let mut blocking = None;
            // rows are unit norm; anything below this is round-off on a dependent row
            let block_tol = lit::<T>(1e-11) * p.norm();
            in_working.iter_mut().for_each(|w| *w = false);
            for &i in self.working.iter().chain(&dependent) {
                in_working[i] = true;
            }
            for i in 0..poly.len() {
                if ap[i] > block_tol && !in_working[i] {
                    let ratio = slack[i].max(T::zero()) / ap[i];
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            x += &p * alpha;
            match blocking {
                // a full step lands on the minimizer over the current working set
                None => at_minimum = true,
                Some(i) => {
                    if admit(&mut basis, poly.rows().row(i).transpose()) {
                        self.working.push(i);
                    } else {
                        // spanned by the working set, so it only blocks through round-off in `p`
                        dependent.push(i);
                    }
                }
            }
        }
        Some(PrimalStep { x, converged: false, iterations: max_iter })
    }
}

/// Adds `v` to the orthonormal `basis` unless it is (numerically) in its span.
fn admit<T: Real>(basis: &mut Vec<DVector<T>>, mut v: DVector<T>) -> bool {
    if basis.len() >= v.len() {
        return false;
    }
    let norm0 = v.norm();
    for _ in 0..2 {
        for q in basis.iter() {
            let c = q.dot(&v);
            v.axpy(-c, q, T::one());
        }
    }
    let norm = v.norm();
    if norm <= lit::<T>(1e-9) * norm0 {
        return false;
    }
    basis.push(v / norm);
    true
}

fn orthonormal_basis<T: Real>(poly: &Polytope<T>, working: &[usize]) -> Vec<DVector<T>> {
    let mut basis = Vec::new();
    for &i in working {
        admit(&mut basis, poly.rows().row(i).transpose());
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn unconstrained_minimum() {
        let poly = Polytope::new(&DMatrix::<f64>::zeros(0, 1), &DVector::zeros(0));
        let sol = solve_dual(&dmatrix![4.0], &dvector![-4.0], &poly, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clamped_minimum() {
        let m = dmatrix![1.0f64];
        let b = dvector![0.5];
        let poly = Polytope::new(&m, &b);
        let g = dmatrix![4.0];
        let a = dvector![-4.0];
        let sol = solve_dual(&g, &a, &poly, 100).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-15);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-12);
        assert!(kkt_residual(&g, &a, &m, &b, &sol.x, &sol.multipliers) < 1e-12);
    }

    #[test]
    fn infeasible_box_has_certificate() {
        let m = dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0];
        let b = dvector![-1.0, -1.0, 3.0];
        let poly = Polytope::new(&m, &b);
        let sol = solve_dual(&DMatrix::identity(2, 2), &dvector![0.0, 0.0], &poly, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let y = sol.certificate.unwrap();
        assert!(y.iter().all(|&v| v >= 0.0));
        assert!((m.transpose() * &y).amax() < 1e-12);
        assert!(b.dot(&y) < 0.0);
    }

    #[test]
    fn duplicate_rows_merge() {
        let m = dmatrix![1.0, 1.0; 2.0, 2.0; 0.0, 0.0];
        let b = dvector![1.0, 4.0, 0.0];
        let poly = Polytope::new(&m, &b);
        assert_eq!(poly.len(), 1);
        let sol = solve_dual(&DMatrix::identity(2, 2), &dvector![-2.0, -2.0], &poly, 100).unwrap();
        assert!((&sol.x - dvector![0.5, 0.5]).amax() < 1e-14);
        // the tighter original row carries the multiplier
        assert!(sol.multipliers[0] > 0.0 && sol.multipliers[1] == 0.0);
        assert!(kkt_residual(&DMatrix::identity(2, 2), &dvector![-2.0, -2.0], &m, &b, &sol.x, &sol.multipliers) < 1e-12);
    }

    #[test]
    fn primal_and_dual_agree() {
        let g = dmatrix![3.0, 1.0, 0.0; 1.0, 2.0, 0.5; 0.0, 0.5, 1.5];
        let a = dvector![-4.0, 1.0, -3.0];
        let m = dmatrix![1.0, 1.0, 1.0; -1.0, 0.0, 0.0; 0.0, -1.0, 0.0; 0.0, 0.0, -1.0; 1.0, -1.0, 0.0];
        let b = dvector![1.0, 0.0, 0.0, 0.0, 0.2];
        let poly = Polytope::new(&m, &b);
        let dual = solve_dual(&g, &a, &poly, 100).unwrap();
        let mut primal = PrimalActiveSet::new();
        let step = primal.solve(&g, &a, &poly, &dvector![0.0, 0.0, 0.0], 100).unwrap();
        assert!(step.converged);
        assert!((step.x - &dual.x).amax() < 1e-12);
        // warm start from the solution converges immediately
        let again = primal.solve(&g, &a, &poly, &dual.x, 100).unwrap();
        assert!(again.converged && again.iterations <= 2);
    }

    #[test]
    fn projection_onto_simplex_corner() {
        let m = dmatrix![1.0, 1.0; -1.0, 0.0; 0.0, -1.0];
        let b = dvector![1.0, 0.0, 0.0];
        let poly = Polytope::new(&m, &b);
        let x = project(&poly, &dvector![3.0, -1.0]).unwrap();
        assert!((x - dvector![1.0, 0.0]).amax() < 1e-14);
    }
}
