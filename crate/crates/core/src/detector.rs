//! Multiple-model adaptive estimation.
//!
//! One Kalman filter per mode feeds a Bayesian posterior over modes. A [`DetectorBank`]
//! runs `N` such detectors with start offsets `0..N`, each deciding once per `N`-step
//! window, so after warm-up exactly one decision is emitted per step.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{LinearGaussianSystem, ModeSet};
use crate::scalar::{lit, symmetrize, to_f64, Real};

/// Lower clamp applied to every supported mode probability after an update.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanFilterState<T: Real> {
    pub mode: usize,
    pub x_hat: DVector<T>,
    pub p: DMatrix<T>,
}

/// Result of a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct KfStep<T: Real> {
    pub state: KalmanFilterState<T>,
    pub innovation: DVector<T>,
    pub innovation_cov: DMatrix<T>,
}

impl<T: Real> KalmanFilterState<T> {
    pub fn new(mode: usize, x_hat: DVector<T>, p: DMatrix<T>) -> Self {
        Self { mode, x_hat, p }
    }

    /// Time update `x⁻ = A x̂ + B_μ u`, `P⁻ = A P Aᵀ + Hw`.
    pub fn predict(&self, sys: &LinearGaussianSystem<T>, b_mode: &DMatrix<T>, u: &DVector<T>) -> Self {
        let x_hat = sys.a() * &self.x_hat + b_mode * u;
        let p = symmetrize(&(sys.a() * &self.p * sys.a().transpose() + sys.hw()));
        Self { mode: self.mode, x_hat, p }
    }

    /// Measurement update with `y`; the innovation is taken against the current (predicted) mean.
    pub fn update(&self, sys: &LinearGaussianSystem<T>, y: &DVector<T>) -> Result<KfStep<T>> {
        let c = sys.c();
        let innovation = y - c * &self.x_hat;
        let s = symmetrize(&(c * &self.p * c.transpose() + sys.hv()));
        let chol = Cholesky::new(s.clone()).ok_or_else(|| Error::Numerical {
            mode: self.mode,
            message: "innovation covariance is not positive definite".into(),
        })?;
        // K = P Cᵀ S⁻¹, computed as (S⁻¹ C P)ᵀ
        let gain = chol.solve(&(c * &self.p)).transpose();
        let x_hat = &self.x_hat + &gain * &innovation;
        // Joseph form keeps P symmetric PSD
        let n = self.p.nrows();
        let ikc = DMatrix::identity(n, n) - &gain * c;
        let p = symmetrize(&(&ikc * &self.p * ikc.transpose() + &gain * sys.hv() * gain.transpose()));
        Ok(KfStep {
            state: Self { mode: self.mode, x_hat, p },
            innovation,
            innovation_cov: s,
        })
    }
}

/// Predict with the previous input `u_prev`, then update with `y`.
pub fn kf_step<T: Real>(
    filter: &KalmanFilterState<T>,
    sys: &LinearGaussianSystem<T>,
    b_mode: &DMatrix<T>,
    u_prev: &DVector<T>,
    y: &DVector<T>,
) -> Result<KfStep<T>> {
    filter.predict(sys, b_mode, u_prev).update(sys, y)
}

/// `P(μ_i | y_{0:k}, u_{0:k-1})` for every mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePosterior<T: Real> {
    probs: DVector<T>,
}

impl<T: Real> ModePosterior<T> {
    pub fn new(probs: DVector<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("posterior over zero modes"));
        }
        if probs.iter().any(|&q| !(q >= T::zero() && q <= T::one())) {
            return Err(Error::invalid("posterior entries must lie in [0, 1]"));
        }
        if (probs.sum() - T::one()).abs() > lit(1e-10) {
            return Err(Error::invalid("posterior must sum to 1"));
        }
        Ok(Self { probs })
    }

    pub fn from_priors(modes: &ModeSet<T>) -> Self {
        Self { probs: modes.priors().clone() }
    }

    pub fn probs(&self) -> &DVector<T> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorUpdate<T: Real> {
    pub posterior: ModePosterior<T>,
    /// Set when no mode produced a finite likelihood and the posterior was left unchanged.
    pub flat_likelihood: bool,
}

/// Gaussian log-density of `innovation` under `N(0, cov)`.
pub fn innovation_log_likelihood<T: Real>(
    mode: usize,
    innovation: &DVector<T>,
    cov: &DMatrix<T>,
) -> Result<T> {
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::Numerical {
        mode,
        message: "innovation covariance is not positive definite".into(),
    })?;
    Ok(log_density(&chol, innovation))
}

fn log_density<T: Real>(chol: &Cholesky<T, Dyn>, r: &DVector<T>) -> T {
    let m = r.len();
    let half_logdet = chol.l().diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln());
    let z = chol.l().solve_lower_triangular(r).expect("Cholesky factor is invertible");
    let two_pi: T = lit(std::f64::consts::TAU);
    -lit::<T>(0.5) * (z.norm_squared() + two_pi.ln() * lit(m as f64)) - half_logdet
}

/// Bayes update of the mode posterior from every filter's innovation.
///
/// Zero-probability modes stay at zero; supported modes are floored at [`POSTERIOR_FLOOR`].
pub fn posterior_update<T: Real>(
    post: &ModePosterior<T>,
    innovations: &[(DVector<T>, DMatrix<T>)],
) -> Result<PosteriorUpdate<T>> {
    if innovations.len() != post.len() {
        return Err(Error::invalid(format!(
            "{} innovations for {} modes",
            innovations.len(),
            post.len()
        )));
    }
    let mut log_w = Vec::with_capacity(post.len());
    for (i, (nu, s)) in innovations.iter().enumerate() {
        let prior = post.probs[i];
        if prior > T::zero() {
            let ll = innovation_log_likelihood(i, nu, s)?;
            log_w.push(Some(prior.ln() + ll));
        } else {
            log_w.push(None);
        }
    }
    let max = log_w
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .reduce(|a, b| a.max(b));
    let Some(max) = max else {
        log::warn!("all mode likelihoods underflowed; posterior left unchanged");
        return Ok(PosteriorUpdate { posterior: post.clone(), flat_likelihood: true });
    };
    let mut w = DVector::from_iterator(
        log_w.len(),
        log_w.iter().map(|lw| match lw {
            Some(v) if v.is_finite() => (*v - max).exp(),
            _ => T::zero(),
        }),
    );
    w /= w.sum();
    let floor: T = lit(POSTERIOR_FLOOR);
    for (i, wi) in w.iter_mut().enumerate() {
        if post.probs[i] > T::zero() {
            *wi = wi.max(floor);
        }
    }
    w /= w.sum();
    Ok(PosteriorUpdate { posterior: ModePosterior { probs: w }, flat_likelihood: false })
}

/// Index of the most probable mode; ties go to the lowest index.
pub fn decide<T: Real>(post: &ModePosterior<T>) -> usize {
    let mut best = 0;
    for (i, &q) in post.probs.iter().enumerate().skip(1) {
        if q > post.probs[best] {
            best = i;
        }
    }
    best
}

/// Gaussian state belief `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Real> Belief<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        Self { mean, cov }
    }

    pub fn of_system(sys: &LinearGaussianSystem<T>) -> Self {
        Self::new(sys.x0_mean().clone(), sys.x0_cov().clone())
    }
}

/// Moment-matched Gaussian of a weighted mixture of filter states.
pub fn mixture_belief<T: Real>(filters: &[KalmanFilterState<T>], weights: &DVector<T>) -> Belief<T> {
    let n = filters[0].x_hat.len();
    let mut mean = DVector::zeros(n);
    for (f, &w) in filters.iter().zip(weights.iter()) {
        mean += &f.x_hat * w;
    }
    let mut cov = DMatrix::zeros(n, n);
    for (f, &w) in filters.iter().zip(weights.iter()) {
        let d = &f.x_hat - &mean;
        cov += (&f.p + &d * d.transpose()) * w;
    }
    Belief::new(mean, symmetrize(&cov))
}

/// One MMAE instance: a filter per mode and a posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T: Real> {
    id: usize,
    filters: Vec<KalmanFilterState<T>>,
    posterior: ModePosterior<T>,
}

impl<T: Real> Detector<T> {
    fn new(id: usize, modes: &ModeSet<T>, belief: &Belief<T>) -> Self {
        let filters = (0..modes.len())
            .map(|i| KalmanFilterState::new(i, belief.mean.clone(), belief.cov.clone()))
            .collect();
        Self { id, filters, posterior: ModePosterior::from_priors(modes) }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn filters(&self) -> &[KalmanFilterState<T>] {
        &self.filters
    }

    pub fn posterior(&self) -> &ModePosterior<T> {
        &self.posterior
    }

    /// Posterior-weighted mixture of the filter beliefs.
    pub fn belief(&self) -> Belief<T> {
        mixture_belief(&self.filters, self.posterior.probs())
    }

    fn restart(&mut self, modes: &ModeSet<T>) {
        let belief = self.belief();
        *self = Self::new(self.id, modes, &belief);
    }

    fn observe(&mut self, sys: &LinearGaussianSystem<T>, y: &DVector<T>) -> Result<bool> {
        let steps = self
            .filters
            .iter()
            .map(|f| f.update(sys, y))
            .collect::<Result<Vec<_>>>()?;
        let innovations: Vec<_> = steps
            .iter()
            .map(|s| (s.innovation.clone(), s.innovation_cov.clone()))
            .collect();
        let update = posterior_update(&self.posterior, &innovations)?;
        self.filters = steps.into_iter().map(|s| s.state).collect();
        self.posterior = update.posterior;
        Ok(update.flat_likelihood)
    }

    fn advance(&mut self, sys: &LinearGaussianSystem<T>, modes: &ModeSet<T>, u: &DVector<T>) {
        for f in &mut self.filters {
            *f = f.predict(sys, &modes.input_matrices()[f.mode], u);
        }
    }
}

/// A decision emitted when a detector's window closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub step: usize,
    pub detector: usize,
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankStep {
    pub decision: Option<Decision>,
    /// Detectors whose likelihoods all underflowed at this step.
    pub flat_likelihood: Vec<usize>,
}

/// `N` staggered detectors; detector `d` opens a window at every step `k ≥ d` with `k ≡ d (mod N)`.
///
/// Before its first window a detector runs as warm-up without deciding. At every window start
/// the detector restarts from the moment-matched mixture of its own filters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBank<T: Real> {
    horizon: usize,
    step: usize,
    modes: ModeSet<T>,
    detectors: Vec<Detector<T>>,
}

impl<T: Real> DetectorBank<T> {
    pub fn new(horizon: usize, modes: &ModeSet<T>, x0_belief: &Belief<T>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("detection horizon must be positive"));
        }
        let detectors = (0..horizon).map(|d| Detector::new(d, modes, x0_belief)).collect();
        Ok(Self { horizon, step: 0, modes: modes.clone(), detectors })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index of the next step to be processed.
    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn detectors(&self) -> &[Detector<T>] {
        &self.detectors
    }

    pub fn detector(&self, id: usize) -> &Detector<T> {
        &self.detectors[id]
    }

    /// Detector whose window closes at step `k`, if any.
    pub fn closing_detector(&self, k: usize) -> Option<usize> {
        let d = (k + 1) % self.horizon;
        (k + 1 >= self.horizon).then_some(d)
    }

    /// Consumes `y_k`, then the input `u_k` applied after measuring it.
    pub fn step(
        &mut self,
        sys: &LinearGaussianSystem<T>,
        y: &DVector<T>,
        u: &DVector<T>,
    ) -> Result<BankStep> {
        let k = self.step;
        let n_det = self.horizon;
        let mut flat = Vec::new();
        let mut decision = None;
        for det in &mut self.detectors {
            let d = det.id;
            let in_window = k >= d;
            if in_window && (k - d) % n_det == 0 && k > 0 {
                det.restart(&self.modes);
            }
            if det.observe(sys, y)? {
                flat.push(d);
            }
            if in_window && (k - d) % n_det == n_det - 1 {
                decision = Some(Decision { step: k, detector: d, mode: decide(&det.posterior) });
            }
            det.advance(sys, &self.modes, u);
        }
        self.step += 1;
        Ok(BankStep { decision, flat_likelihood: flat })
    }
}

/// Header of the detector telemetry CSV: `k,detector_id,mode_0..mode_{M-1},decision`.
pub fn telemetry_header(num_modes: usize) -> String {
    let mut h = String::from("k,detector_id");
    for i in 0..num_modes {
        write!(h, ",mode_{i}").unwrap();
    }
    h.push_str(",decision");
    h
}

/// Telemetry rows for every detector after bank step `k`; `decision` is empty unless emitted.
pub fn telemetry_rows<T: Real>(bank: &DetectorBank<T>, k: usize, decision: Option<Decision>) -> Vec<String> {
    bank.detectors()
        .iter()
        .map(|det| {
            let mut row = format!("{k},{}", det.id());
            for &q in det.posterior().probs().iter() {
                write!(row, ",{:.12e}", to_f64(q)).unwrap();
            }
            row.push(',');
            if let Some(dec) = decision.filter(|d| d.detector == det.id()) {
                write!(row, "{}", dec.mode).unwrap();
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::enumerate_modes;
    use nalgebra::{dmatrix, dvector};

    fn scalar(hw: f64, hv: f64) -> LinearGaussianSystem<f64> {
        LinearGaussianSystem::new(
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![hw],
            dmatrix![hv],
            dvector![0.0],
            dmatrix![1.0],
        )
        .unwrap()
    }

    #[test]
    fn textbook_scalar_update() {
        let sys = scalar(0.0, 1.0);
        let f = KalmanFilterState::new(0, dvector![0.0], dmatrix![1.0]);
        let step = kf_step(&f, &sys, &dmatrix![1.0], &dvector![0.0], &dvector![1.0]).unwrap();
        assert!((step.innovation_cov[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((step.state.x_hat[0] - 0.5).abs() < 1e-15);
        assert!((step.state.p[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((step.innovation[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uninformative_measurement_keeps_prediction() {
        let sys = LinearGaussianSystem::new(
            dmatrix![0.9, 0.2; 0.0, 1.1],
            dmatrix![1.0; 0.5],
            dmatrix![1.0, 1.0],
            DMatrix::zeros(2, 2),
            dmatrix![1e12],
            dvector![0.0, 0.0],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let f = KalmanFilterState::new(0, dvector![3.0, -2.0], DMatrix::identity(2, 2));
        let pred = f.predict(&sys, sys.b(), &dvector![1.5]);
        let step = kf_step(&f, &sys, sys.b(), &dvector![1.5], &dvector![100.0]).unwrap();
        assert!((&step.state.x_hat - &pred.x_hat).norm() <= 1e-6 * pred.x_hat.norm());
    }

    #[test]
    fn singular_innovation_reports_mode() {
        let sys = scalar(0.0, 0.0);
        let f = KalmanFilterState::new(3, dvector![0.0], dmatrix![0.0]);
        match f.update(&sys, &dvector![1.0]) {
            Err(Error::Numerical { mode, .. }) => assert_eq!(mode, 3),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn symmetric_hypotheses_keep_prior() {
        let post = ModePosterior::new(dvector![0.3, 0.7]).unwrap();
        let nu = dvector![0.8];
        let s = dmatrix![2.0];
        let out = posterior_update(&post, &[(nu.clone(), s.clone()), (nu, s)]).unwrap();
        assert!((out.posterior.probs() - post.probs()).amax() < 1e-12);
    }

    #[test]
    fn zero_prior_is_absorbing() {
        let post = ModePosterior::new(dvector![1.0, 0.0]).unwrap();
        let out = posterior_update(
            &post,
            &[(dvector![50.0], dmatrix![1.0]), (dvector![0.0], dmatrix![1.0])],
        )
        .unwrap();
        assert_eq!(out.posterior.probs(), &dvector![1.0, 0.0]);
    }

    #[test]
    fn floor_prevents_lockout() {
        let post = ModePosterior::new(dvector![0.5f64, 0.5]).unwrap();
        let out = posterior_update(
            &post,
            &[(dvector![0.0], dmatrix![1e-4]), (dvector![1e3], dmatrix![1e-4])],
        )
        .unwrap();
        assert!(out.posterior.probs()[1] > 0.0);
        assert!((out.posterior.probs().sum() - 1.0).abs() < 1e-12);
        assert_eq!(decide(&out.posterior), 0);
    }

    #[test]
    fn flat_likelihood_leaves_posterior() {
        let post = ModePosterior::new(dvector![0.25, 0.75]).unwrap();
        let inf = f64::INFINITY;
        let out = posterior_update(
            &post,
            &[(dvector![inf], dmatrix![1.0]), (dvector![inf], dmatrix![1.0])],
        )
        .unwrap();
        assert!(out.flat_likelihood);
        assert_eq!(out.posterior, post);
    }

    #[test]
    fn argmax_with_tie_break() {
        assert_eq!(decide(&ModePosterior::new(dvector![0.1, 0.7, 0.2]).unwrap()), 1);
        assert_eq!(decide(&ModePosterior::new(dvector![0.5, 0.5]).unwrap()), 0);
    }

    #[test]
    fn decisions_follow_schedule() {
        let sys = scalar(0.01, 0.01);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        let mut bank = DetectorBank::new(3, &modes, &Belief::of_system(&sys)).unwrap();
        let mut emitted = Vec::new();
        for k in 0..9 {
            let step = bank.step(&sys, &dvector![0.0], &dvector![1.0]).unwrap();
            if let Some(d) = step.decision {
                assert_eq!(d.step, k);
                assert_eq!(Some(d.detector), bank.closing_detector(k));
                emitted.push((k, d.detector));
            }
        }
        assert_eq!(
            emitted,
            vec![(2, 0), (3, 1), (4, 2), (5, 0), (6, 1), (7, 2), (8, 0)]
        );
    }

    #[test]
    fn telemetry_layout() {
        assert_eq!(telemetry_header(2), "k,detector_id,mode_0,mode_1,decision");
        let sys = scalar(0.01, 0.01);
        let modes = enumerate_modes(sys.b(), &dvector![0.5, 0.5]).unwrap();
        let bank = DetectorBank::new(2, &modes, &Belief::of_system(&sys)).unwrap();
        let rows = telemetry_rows(&bank, 0, Some(Decision { step: 0, detector: 1, mode: 1 }));
        assert_eq!(rows.len(), 2);
        assert!(rows[0].ends_with(','));
        assert!(rows[1].ends_with(",1"));
    }
}
