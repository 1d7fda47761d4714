//! Mode-indexed linear Gaussian system and its trajectory moments.
//!
//! A prevented-actuation attack on actuator `j` removes column `j` of `B`. With `p`
//! actuators there are `2^p` modes, one per subset of attacked actuators. Mode `i`
//! attacks actuator `j` iff bit `j` of `i` is set, so mode 0 is attack-free.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{lit, relative_asymmetry, Real};

/// Largest actuator count accepted by [`enumerate_modes`].
pub const MAX_INPUTS: usize = 12;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// `x_{k+1} = A x_k + B u_k + w_k`, `y_k = C x_k + v_k` with Gaussian `w`, `v`, `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSystem<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    hw: DMatrix<T>,
    hv: DMatrix<T>,
    x0_mean: DVector<T>,
    x0_cov: DMatrix<T>,
}

impl<T: Real> LinearGaussianSystem<T> {
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        hw: DMatrix<T>,
        hv: DMatrix<T>,
        x0_mean: DVector<T>,
        x0_cov: DMatrix<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::invalid(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::invalid(format!("B must have {n} rows, got {}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::invalid(format!("C must have {n} columns, got {}", c.ncols())));
        }
        let m = c.nrows();
        check_shape("Hw", &hw, n, n)?;
        check_shape("Hv", &hv, m, m)?;
        check_shape("x0_cov", &x0_cov, n, n)?;
        if x0_mean.len() != n {
            return Err(Error::invalid(format!("x0_mean must have length {n}, got {}", x0_mean.len())));
        }
        check_psd("Hw", &hw)?;
        check_psd("Hv", &hv)?;
        check_psd("x0_cov", &x0_cov)?;
        Ok(Self { a, b, c, hw, hv, x0_mean, x0_cov })
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }
    pub fn hw(&self) -> &DMatrix<T> {
        &self.hw
    }
    pub fn hv(&self) -> &DMatrix<T> {
        &self.hv
    }
    pub fn x0_mean(&self) -> &DVector<T> {
        &self.x0_mean
    }
    pub fn x0_cov(&self) -> &DMatrix<T> {
        &self.x0_cov
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn p(&self) -> usize {
        self.b.ncols()
    }
    /// Output dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Same dynamics with a different initial-state belief.
    pub fn with_initial_belief(&self, x0_mean: DVector<T>, x0_cov: DMatrix<T>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            self.hw.clone(),
            self.hv.clone(),
            x0_mean,
            x0_cov,
        )
    }
}

fn check_shape<T: Real>(name: &str, m: &DMatrix<T>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::invalid(format!(
            "{name} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_psd<T: Real>(name: &str, m: &DMatrix<T>) -> Result<()> {
    if relative_asymmetry(m) > lit(SYMMETRY_TOL) {
        return Err(Error::invalid(format!("{name} is not symmetric")));
    }
    let trace = m.trace();
    let eig = SymmetricEigen::new(m.clone());
    let floor = -lit::<T>(PSD_TOL) * trace.abs();
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(|a, b| a.min(b)) {
        if min < floor {
            return Err(Error::invalid(format!("{name} is not positive semi-definite")));
        }
    }
    Ok(())
}

/// Zeroes the columns of `b` flagged in `mask`.
pub fn apply_mode_mask<T: Real>(b: &DMatrix<T>, mask: &[bool]) -> Result<DMatrix<T>> {
    if mask.len() != b.ncols() {
        return Err(Error::invalid(format!(
            "mask has length {} but B has {} columns",
            mask.len(),
            b.ncols()
        )));
    }
    let mut out = b.clone();
    for (j, _) in mask.iter().enumerate().filter(|(_, &attacked)| attacked) {
        out.column_mut(j).fill(T::zero());
    }
    Ok(out)
}

/// The `2^p` attack hypotheses with their input matrices and priors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet<T: Real> {
    masks: Vec<Vec<bool>>,
    input_matrices: Vec<DMatrix<T>>,
    priors: DVector<T>,
}

/// Borrowed view of one mode.
#[derive(Debug, Clone, Copy)]
pub struct Mode<'a, T: Real> {
    pub index: usize,
    pub mask: &'a [bool],
    pub input_matrix: &'a DMatrix<T>,
    pub prior: T,
}

/// Mask of mode `index` under the binary-counting convention.
pub fn mask_for_index(index: usize, p: usize) -> Vec<bool> {
    (0..p).map(|j| index >> j & 1 == 1).collect()
}

/// Builds all `2^p` modes in binary-counting order.
pub fn enumerate_modes<T: Real>(b: &DMatrix<T>, priors: &DVector<T>) -> Result<ModeSet<T>> {
    let p = b.ncols();
    if p > MAX_INPUTS {
        return Err(Error::Capacity { inputs: p, max: MAX_INPUTS });
    }
    let count = 1usize << p;
    let masks: Vec<Vec<bool>> = (0..count).map(|i| mask_for_index(i, p)).collect();
    ModeSet::from_masks(b, masks, priors.clone())
}

impl<T: Real> ModeSet<T> {
    /// Builds a mode set from explicit masks (any order, attack-free first).
    pub fn from_masks(b: &DMatrix<T>, masks: Vec<Vec<bool>>, priors: DVector<T>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::invalid("mode set is empty"));
        }
        if priors.len() != masks.len() {
            return Err(Error::invalid(format!(
                "{} priors for {} modes",
                priors.len(),
                masks.len()
            )));
        }
        if priors.iter().any(|&q| q < T::zero() || !q.is_finite()) {
            return Err(Error::invalid("priors must be non-negative"));
        }
        if (priors.sum() - T::one()).abs() > lit(1e-12) {
            return Err(Error::invalid("priors must sum to 1"));
        }
        if masks[0].iter().any(|&a| a) {
            return Err(Error::invalid("mode 0 must be the attack-free mask"));
        }
        for (i, mi) in masks.iter().enumerate() {
            if masks[..i].contains(mi) {
                return Err(Error::invalid(format!("mask of mode {i} is duplicated")));
            }
        }
        let input_matrices = masks
            .iter()
            .map(|mask| apply_mode_mask(b, mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { masks, input_matrices, priors })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn input_matrices(&self) -> &[DMatrix<T>] {
        &self.input_matrices
    }

    pub fn priors(&self) -> &DVector<T> {
        &self.priors
    }

    pub fn mode(&self, index: usize) -> Mode<'_, T> {
        Mode {
            index,
            mask: &self.masks[index],
            input_matrix: &self.input_matrices[index],
            prior: self.priors[index],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Mode<'_, T>> + '_ {
        (0..self.len()).map(move |i| self.mode(i))
    }

    /// Same masks with new priors.
    pub fn with_priors(&self, priors: DVector<T>) -> Result<Self> {
        // mode 0 is attack-free, so its input matrix is the nominal B
        Self::from_masks(&self.input_matrices[0], self.masks.clone(), priors)
    }
}

/// Stacked control sequence `u_{0:N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence<T: Real> {
    u: DVector<T>,
    p: usize,
}

impl<T: Real> ControlSequence<T> {
    pub fn new(u: DVector<T>, p: usize) -> Result<Self> {
        if p == 0 || u.len() % p != 0 {
            return Err(Error::invalid(format!(
                "control vector of length {} is not a multiple of p={p}",
                u.len()
            )));
        }
        Ok(Self { u, p })
    }

    pub fn zeros(p: usize, horizon: usize) -> Self {
        Self { u: DVector::zeros(p * horizon), p }
    }

    pub fn from_steps(steps: &[DVector<T>]) -> Result<Self> {
        let p = steps.first().map(|s| s.len()).unwrap_or(0);
        if steps.iter().any(|s| s.len() != p) {
            return Err(Error::invalid("control steps have differing lengths"));
        }
        let flat: Vec<T> = steps.iter().flat_map(|s| s.iter().copied()).collect();
        Self::new(DVector::from_vec(flat), p.max(1))
    }

    pub fn horizon(&self) -> usize {
        self.u.len() / self.p
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.u
    }

    pub fn into_vector(self) -> DVector<T> {
        self.u
    }

    /// Input applied at step `k`.
    pub fn step(&self, k: usize) -> DVector<T> {
        self.u.rows(k * self.p, self.p).into_owned()
    }
}

/// Mean and full covariance of the stacked state and output over `0..=N` for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMoments<T: Real> {
    pub mode: usize,
    pub horizon: usize,
    pub x_mean: DVector<T>,
    pub x_cov: DMatrix<T>,
    pub y_mean: DVector<T>,
    pub y_cov: DMatrix<T>,
}

impl<T: Real> TrajectoryMoments<T> {
    pub fn x_mean_block(&self, k: usize) -> DVector<T> {
        let n = self.x_mean.len() / (self.horizon + 1);
        self.x_mean.rows(k * n, n).into_owned()
    }

    pub fn y_mean_block(&self, k: usize) -> DVector<T> {
        let m = self.y_mean.len() / (self.horizon + 1);
        self.y_mean.rows(k * m, m).into_owned()
    }

    pub fn x_cov_block(&self, k: usize, l: usize) -> DMatrix<T> {
        let n = self.x_mean.len() / (self.horizon + 1);
        self.x_cov.view((k * n, l * n), (n, n)).into_owned()
    }

    pub fn y_cov_block(&self, k: usize, l: usize) -> DMatrix<T> {
        let m = self.y_mean.len() / (self.horizon + 1);
        self.y_cov.view((k * m, l * m), (m, m)).into_owned()
    }
}

/// Stacked state covariance over `0..=horizon`; identical for every mode and input.
///
/// Diagonal blocks follow `H(l,l) = A H(l-1,l-1) Aᵀ + Hw`, and `H(k,l) = A^{k-l} H(l,l)` for `k ≥ l`.
pub fn state_covariance<T: Real>(sys: &LinearGaussianSystem<T>, horizon: usize) -> DMatrix<T> {
    let n = sys.n();
    let len = n * (horizon + 1);
    let mut h = DMatrix::zeros(len, len);
    let mut diag = sys.x0_cov().clone();
    for l in 0..=horizon {
        if l > 0 {
            diag = sys.a() * &diag * sys.a().transpose() + sys.hw();
        }
        let mut block = diag.clone();
        for k in l..=horizon {
            if k > l {
                block = sys.a() * &block;
            }
            h.view_mut((k * n, l * n), (n, n)).copy_from(&block);
            if k != l {
                h.view_mut((l * n, k * n), (n, n)).copy_from(&block.transpose());
            }
        }
    }
    h
}

/// Stacked output covariance from a stacked state covariance: `C H(k,l) Cᵀ`, plus `Hv` on the diagonal.
pub fn output_covariance<T: Real>(
    sys: &LinearGaussianSystem<T>,
    x_cov: &DMatrix<T>,
    horizon: usize,
) -> DMatrix<T> {
    let (n, m) = (sys.n(), sys.m());
    let len = m * (horizon + 1);
    let mut h = DMatrix::zeros(len, len);
    for k in 0..=horizon {
        for l in 0..=horizon {
            let xb = x_cov.view((k * n, l * n), (n, n));
            let mut yb = sys.c() * xb * sys.c().transpose();
            if k == l {
                yb += sys.hv();
            }
            h.view_mut((k * m, l * m), (m, m)).copy_from(&yb);
        }
    }
    h
}

/// Mean state trajectory `x̄_{0:N}` under input matrix `b_mode`.
pub fn state_mean<T: Real>(
    sys: &LinearGaussianSystem<T>,
    b_mode: &DMatrix<T>,
    u: &ControlSequence<T>,
) -> Result<DVector<T>> {
    let (n, p) = (sys.n(), sys.p());
    if u.input_dim() != p || b_mode.shape() != (n, p) {
        return Err(Error::invalid(format!(
            "input dimension {} / mode matrix {:?} inconsistent with system (n={n}, p={p})",
            u.input_dim(),
            b_mode.shape()
        )));
    }
    let horizon = u.horizon();
    let mut out = DVector::zeros(n * (horizon + 1));
    let mut x = sys.x0_mean().clone();
    out.rows_mut(0, n).copy_from(&x);
    for k in 0..horizon {
        x = sys.a() * &x + b_mode * u.step(k);
        out.rows_mut((k + 1) * n, n).copy_from(&x);
    }
    Ok(out)
}

/// Exact mode-conditioned moments of the state and output trajectories.
pub fn propagate_moments<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    mode: usize,
    u: &ControlSequence<T>,
) -> Result<TrajectoryMoments<T>> {
    if mode >= modes.len() {
        return Err(Error::invalid(format!("mode {mode} out of range ({} modes)", modes.len())));
    }
    let horizon = u.horizon();
    let x_mean = state_mean(sys, &modes.input_matrices()[mode], u)?;
    let x_cov = state_covariance(sys, horizon);
    let (n, m) = (sys.n(), sys.m());
    let mut y_mean = DVector::zeros(m * (horizon + 1));
    for k in 0..=horizon {
        let yk = sys.c() * x_mean.rows(k * n, n);
        y_mean.rows_mut(k * m, m).copy_from(&yk);
    }
    let y_cov = output_covariance(sys, &x_cov, horizon);
    Ok(TrajectoryMoments { mode, horizon, x_mean, x_cov, y_mean, y_cov })
}

/// Square root `L` with `L Lᵀ = cov`, via symmetric eigendecomposition.
///
/// Eigenvalues in `[-1e-10·trace, 0)` are clamped to zero; anything more negative is rejected.
pub fn covariance_sqrt<T: Real>(cov: &DMatrix<T>) -> Result<DMatrix<T>> {
    if cov.is_empty() {
        return Ok(cov.clone());
    }
    let trace = cov.trace().abs();
    let eig = SymmetricEigen::new(cov.clone());
    let floor = -lit::<T>(PSD_TOL) * trace;
    let mut sqrt_vals = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < floor {
            return Err(Error::Factorization(format!(
                "covariance has eigenvalue {} below tolerance",
                crate::scalar::to_f64(lambda)
            )));
        }
        sqrt_vals[i] = lambda.max(T::zero()).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

/// One sampled trajectory: `states[k] = x_k` for `k = 0..=N`, likewise `outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T: Real> {
    pub states: Vec<DVector<T>>,
    pub outputs: Vec<DVector<T>>,
}

/// Precomputed noise factors for repeated rollouts of one system.
#[derive(Debug, Clone)]
pub struct RolloutSampler<T: Real> {
    sys: LinearGaussianSystem<T>,
    sqrt_x0: DMatrix<T>,
    sqrt_w: DMatrix<T>,
    sqrt_v: DMatrix<T>,
}

pub(crate) fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<T> {
    DVector::from_fn(len, |_, _| lit(rng.sample::<f64, _>(StandardNormal)))
}

impl<T: Real> RolloutSampler<T> {
    pub fn new(sys: &LinearGaussianSystem<T>) -> Result<Self> {
        Ok(Self {
            sqrt_x0: covariance_sqrt(sys.x0_cov())?,
            sqrt_w: covariance_sqrt(sys.hw())?,
            sqrt_v: covariance_sqrt(sys.hv())?,
            sys: sys.clone(),
        })
    }

    pub fn system(&self) -> &LinearGaussianSystem<T> {
        &self.sys
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        self.sys.x0_mean() + &self.sqrt_x0 * standard_normal(rng, self.sys.n())
    }

    pub fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        &self.sqrt_w * standard_normal(rng, self.sys.n())
    }

    pub fn sample_measurement_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        &self.sqrt_v * standard_normal(rng, self.sys.m())
    }

    /// Iterates the mode dynamics under `b_mode` for `u.horizon()` steps.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        b_mode: &DMatrix<T>,
        u: &ControlSequence<T>,
        rng: &mut R,
    ) -> Result<Rollout<T>> {
        let sys = &self.sys;
        if u.input_dim() != sys.p() || b_mode.shape() != (sys.n(), sys.p()) {
            return Err(Error::invalid("rollout dimensions inconsistent with system"));
        }
        let horizon = u.horizon();
        let mut states = Vec::with_capacity(horizon + 1);
        let mut outputs = Vec::with_capacity(horizon + 1);
        let mut x = self.sample_initial(rng);
        for k in 0..=horizon {
            outputs.push(sys.c() * &x + self.sample_measurement_noise(rng));
            states.push(x.clone());
            if k < horizon {
                x = sys.a() * &x + b_mode * u.step(k) + self.sample_process_noise(rng);
            }
        }
        Ok(Rollout { states, outputs })
    }
}

/// Samples one trajectory of mode `mode`; deterministic in `seed`.
pub fn sample_rollout<T: Real>(
    sys: &LinearGaussianSystem<T>,
    modes: &ModeSet<T>,
    mode: usize,
    u: &ControlSequence<T>,
    seed: u64,
) -> Result<Rollout<T>> {
    if mode >= modes.len() {
        return Err(Error::invalid(format!("mode {mode} out of range ({} modes)", modes.len())));
    }
    let sampler = RolloutSampler::new(sys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler.rollout(&modes.input_matrices()[mode], u, &mut rng)
}
