//! Pools 9 and 10 of the Haughton main channel.
//!
//! The level of pool `g` obeys `ẏ_g = α_{g-1,in} h_{g-1}^{3/2}(t − τ) − α_{g,out} h_g^{3/2}(t − τ')`,
//! with the overshot-gate heads `h_8, h_9, h_10` as inputs. The model is linearized at an
//! operating head, sampled with a zero-order hold that splits each delayed input at its
//! fractional boundary, and driven in closed loop: every `N` steps a control sequence is
//! designed from the current belief and applied open-loop while the detector bank watches.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Belief, DetectorBank};
use crate::error::{Error, Result};
use crate::io::{matrix_from_rows, Rows};
use crate::model::{enumerate_modes, LinearGaussianSystem, ModeSet, RolloutSampler};
use crate::objectives::{
    build_control_objective, build_detection_bound, expand_constraints, output_mean_map, ControlWeights,
};
use crate::optimizer::{solve, Formulation, ProblemSpec, SolveStatus, SolverOptions};

/// Environment variable bounding the number of worker threads.
pub const THREADS_ENV: &str = "ASENTINEL_THREADS";

/// Gate numbers of the three inputs, in input order.
pub const GATES: [u32; 3] = [8, 9, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParameters {
    pub gate: u32,
    /// Inflow discharge coefficient (1/m²).
    pub alpha_in: f64,
    /// Outflow discharge coefficient (1/m²).
    pub alpha_out: f64,
    /// Transport delay (minutes).
    pub tau: f64,
}

impl PoolParameters {
    pub fn new(gate: u32, alpha_in: f64, alpha_out: f64, tau: f64) -> Result<Self> {
        let p = Self { gate, alpha_in, alpha_out, tau };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha_in > 0.0 && self.alpha_out > 0.0 && self.tau > 0.0) {
            return Err(Error::invalid(format!("gate {} parameters must be positive", self.gate)));
        }
        Ok(())
    }
}

/// An input acting on the continuous state through `gain`, `delay` minutes late.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedChannel {
    pub input: usize,
    pub gain: DVector<f64>,
    pub delay: f64,
}

/// `ẋ = A x + Σ_c gain_c u_{input_c}(t − delay_c)`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub inputs: usize,
    pub channels: Vec<DelayedChannel>,
}

impl ContinuousModel {
    /// Input matrix with every delay ignored.
    pub fn undelayed_b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.a.nrows(), self.inputs);
        for ch in &self.channels {
            let mut col = b.column_mut(ch.input);
            col += &ch.gain;
        }
        b
    }

    pub fn without_delays(&self) -> Self {
        let mut m = self.clone();
        for ch in &mut m.channels {
            ch.delay = 0.0;
        }
        m
    }

    /// Right-hand side at `x` with the (already delayed) inputs `u`.
    pub fn rhs(&self, x: &DVector<f64>, delayed: impl Fn(usize, f64) -> f64) -> DVector<f64> {
        let mut dx = &self.a * x;
        for ch in &self.channels {
            dx += &ch.gain * delayed(ch.input, ch.delay);
        }
        dx
    }
}

fn pools_by_gate(pools: &[PoolParameters]) -> Result<[&PoolParameters; 3]> {
    let find = |g: u32| {
        pools
            .iter()
            .find(|p| p.gate == g)
            .ok_or_else(|| Error::invalid(format!("missing parameters for gate {g}")))
    };
    Ok([find(8)?, find(9)?, find(10)?])
}

/// Level rates `(ẏ_9, ẏ_10)` of the nonlinear model at constant heads `(h_8, h_9, h_10)`.
pub fn channel_rhs(pools: &[PoolParameters], heads: &[f64; 3]) -> Result<[f64; 2]> {
    let [p8, p9, p10] = pools_by_gate(pools)?;
    let q = |alpha: f64, h: f64| alpha * h.powf(1.5);
    Ok([
        q(p8.alpha_in, heads[0]) - q(p9.alpha_out, heads[1]),
        q(p9.alpha_in, heads[1]) - q(p10.alpha_out, heads[2]),
    ])
}

/// Jacobian of the level dynamics at `operating_heads`, with the delay of every channel.
///
/// Pool 9 receives gate 8 after `τ_8` and spills over gate 9 immediately; pool 10 receives
/// gate 9 after `τ_9` and spills over gate 10 after `τ_10`. Offtakes are zero.
pub fn linearize_channel(pools: &[PoolParameters], operating_heads: &[f64]) -> Result<ContinuousModel> {
    if operating_heads.len() != 3 {
        return Err(Error::invalid("one operating head per gate (8, 9, 10) is required"));
    }
    if operating_heads.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::invalid("operating heads must be positive"));
    }
    for p in pools {
        p.validate()?;
    }
    let [p8, p9, p10] = pools_by_gate(pools)?;
    let slope = |alpha: f64, h: f64| 1.5 * alpha * h.sqrt();
    let (h8, h9, h10) = (operating_heads[0], operating_heads[1], operating_heads[2]);
    let channels = vec![
        DelayedChannel { input: 0, gain: DVector::from_vec(vec![slope(p8.alpha_in, h8), 0.0]), delay: p8.tau },
        DelayedChannel { input: 1, gain: DVector::from_vec(vec![-slope(p9.alpha_out, h9), 0.0]), delay: 0.0 },
        DelayedChannel { input: 1, gain: DVector::from_vec(vec![0.0, slope(p9.alpha_in, h9)]), delay: p9.tau },
        DelayedChannel { input: 2, gain: DVector::from_vec(vec![0.0, -slope(p10.alpha_out, h10)]), delay: p10.tau },
    ];
    Ok(ContinuousModel { a: DMatrix::zeros(2, 2), c: DMatrix::identity(2, 2), inputs: 3, channels })
}

/// Sampled model `x⁺ = A x + B u`, `y = C x`; the first `levels` states are the continuous
/// ones, the rest hold past inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub levels: usize,
    /// `(input, lag)` held by each pipeline state, in state order.
    pub pipeline: Vec<(usize, usize)>,
}

impl SampledModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Attaches noise and an initial belief.
    pub fn into_system(
        self,
        hw: DMatrix<f64>,
        hv: DMatrix<f64>,
        x0_mean: DVector<f64>,
        x0_cov: DMatrix<f64>,
    ) -> Result<LinearGaussianSystem<f64>> {
        LinearGaussianSystem::new(self.a, self.b, self.c, hw, hv, x0_mean, x0_cov)
    }
}

/// `∫_0^t e^{Aσ} dσ · b`, from the exponential of the augmented matrix `[[A, b], [0, 0]]`.
fn integrated_gain(a: &DMatrix<f64>, b: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = a.nrows();
    if t <= 0.0 {
        return DVector::zeros(n);
    }
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b * t));
    aug.exp().view((0, n), (n, 1)).column(0).into_owned()
}

/// Whole-sample and fractional parts of `delay / ts`.
fn split_delay(delay: f64, ts: f64) -> (usize, f64) {
    let ratio = delay / ts;
    let whole = (ratio + 1e-9).floor();
    let frac = (delay - whole * ts).max(0.0);
    if frac <= 1e-9 * ts {
        (whole as usize, 0.0)
    } else {
        (whole as usize, frac)
    }
}

/// Zero-order-hold sampling with input delays.
///
/// A channel delayed by `τ = d·Ts + f` sees `u_{k−d−1}` for the first `f` minutes of each
/// sample and `u_{k−d}` for the remaining `Ts − f`; both contributions are kept. Input `j`
/// gets `⌈τ/Ts⌉` pipeline states (the largest over its channels) holding `u_{k−1}, u_{k−2}, …`.
pub fn discretize_with_delays(model: &ContinuousModel, ts: f64) -> Result<SampledModel> {
    if !(ts > 0.0) {
        return Err(Error::invalid("sampling time must be positive"));
    }
    let nc = model.a.nrows();
    let p = model.inputs;
    let mut depth = vec![0usize; p];
    for ch in &model.channels {
        if ch.input >= p || ch.gain.len() != nc || ch.delay < 0.0 {
            return Err(Error::invalid("channel inconsistent with the continuous model"));
        }
        let (d, f) = split_delay(ch.delay, ts);
        depth[ch.input] = depth[ch.input].max(d + usize::from(f > 0.0));
    }
    let mut pipeline = Vec::new();
    let mut offset = vec![0usize; p];
    for j in 0..p {
        offset[j] = nc + pipeline.len();
        pipeline.extend((1..=depth[j]).map(|lag| (j, lag)));
    }
    let n = nc + pipeline.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, p);
    a.view_mut((0, 0), (nc, nc)).copy_from(&(&model.a * ts).exp());

    let mut add = |input: usize, lag: usize, gamma: DVector<f64>| {
        if lag == 0 {
            let mut col = b.view_mut((0, input), (nc, 1));
            col += &gamma;
        } else {
            let mut col = a.view_mut((0, offset[input] + lag - 1), (nc, 1));
            col += &gamma;
        }
    };
    for ch in &model.channels {
        let (d, f) = split_delay(ch.delay, ts);
        add(ch.input, d, integrated_gain(&model.a, &ch.gain, ts - f));
        if f > 0.0 {
            let carry = (&model.a * (ts - f)).exp() * integrated_gain(&model.a, &ch.gain, f);
            add(ch.input, d + 1, carry);
        }
    }
    for j in 0..p {
        for lag in 1..=depth[j] {
            let row = offset[j] + lag - 1;
            if lag == 1 {
                b[(row, j)] = 1.0;
            } else {
                a[(row, row - 1)] = 1.0;
            }
        }
    }
    let mut c = DMatrix::zeros(model.c.nrows(), n);
    c.view_mut((0, 0), (model.c.nrows(), nc)).copy_from(&model.c);
    Ok(SampledModel { a, b, c, levels: nc, pipeline })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Start minute (inclusive).
    pub start: f64,
    /// End minute (exclusive, except for the last segment).
    pub end: f64,
    /// Zero-based mode index.
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttackSchedule {
    pub segments: Vec<Segment>,
}

impl AttackSchedule {
    /// Checks that the segments tile `[0, span]` in order.
    pub fn new(segments: Vec<Segment>, span: f64) -> Result<Self> {
        let s = Self { segments };
        s.validate(span)?;
        Ok(s)
    }

    pub fn constant(mode: usize, span: f64) -> Self {
        Self { segments: vec![Segment { start: 0.0, end: span, mode }] }
    }

    pub fn validate(&self, span: f64) -> Result<()> {
        let mut t = 0.0;
        for s in &self.segments {
            if s.start != t || !(s.end > s.start) {
                return Err(Error::invalid(format!(
                    "schedule segment [{}, {}] does not continue from minute {t}",
                    s.start, s.end
                )));
            }
            t = s.end;
        }
        if t != span {
            return Err(Error::invalid(format!("schedule ends at minute {t}, expected {span}")));
        }
        Ok(())
    }

    /// Index of the segment containing `minute`.
    pub fn segment_at(&self, minute: f64) -> Option<usize> {
        let last = self.segments.len().checked_sub(1)?;
        self.segments.iter().enumerate().position(|(i, s)| {
            s.start <= minute && (minute < s.end || (i == last && minute <= s.end))
        })
    }

    pub fn mode_at(&self, minute: f64) -> Option<usize> {
        self.segment_at(minute).map(|i| self.segments[i].mode)
    }
}

/// Solver budget for each window of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSolver {
    pub restarts: usize,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for ScenarioSolver {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { restarts: d.restarts, max_outer: d.max_outer, max_inner: d.max_inner }
    }
}

fn one() -> f64 {
    1.0
}

/// Everything needed to build and run the case study; loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    /// Source of each value, keyed by field name.
    #[serde(default)]
    pub citations: BTreeMap<String, String>,
    pub pools: Vec<PoolParameters>,
    /// Linearization heads `h⁰` (m) at gates 8, 9, 10.
    pub operating_heads: Vec<f64>,
    pub sampling_minutes: f64,
    /// Levels of pools 9 and 10 (m) at time zero.
    pub initial_levels: Vec<f64>,
    /// Variance of the initial levels; pipeline states start known.
    pub initial_level_variance: f64,
    pub level_cap: f64,
    /// `Hw = process_noise · I_n`.
    pub process_noise: f64,
    /// `Hv = measurement_noise · I_2`.
    pub measurement_noise: f64,
    pub priors: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    pub horizon: usize,
    pub jd_max: f64,
    pub jc_max: f64,
    /// Level setpoint held over every window.
    pub reference: Vec<f64>,
    pub duration_minutes: f64,
    pub schedule: AttackSchedule,
    /// Multiplies `Hw`, `Hv` and the initial variance.
    #[serde(default = "one")]
    pub noise_scale: f64,
    #[serde(default)]
    pub solver: ScenarioSolver,
}

impl ChannelScenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// The shipped Haughton scenario.
    pub fn haughton() -> Self {
        Self::from_json(include_str!("../../../scenarios/haughton_9_10.json")).expect("shipped scenario is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.pools {
            p.validate()?;
        }
        pools_by_gate(&self.pools)?;
        if self.initial_levels.len() != 2 || self.reference.len() != 2 {
            return Err(Error::invalid("initial levels and reference need one entry per pool"));
        }
        let positive = [
            self.sampling_minutes,
            self.level_cap,
            self.process_noise,
            self.measurement_noise,
            self.noise_scale,
            self.jd_max,
            self.jc_max,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) || self.initial_level_variance < 0.0 || self.horizon == 0 {
            return Err(Error::invalid("scenario scalars must be positive"));
        }
        if self.priors.len() != 1 << GATES.len() {
            return Err(Error::invalid("one prior per mode (8) is required"));
        }
        let steps = self.duration_minutes / self.sampling_minutes;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::invalid("duration must be a whole number of samples"));
        }
        self.schedule.validate(self.duration_minutes)?;
        if self.schedule.segments.iter().any(|s| s.mode >= self.priors.len()) {
            return Err(Error::invalid("schedule refers to a mode out of range"));
        }
        Ok(())
    }

    pub fn with_noise_scale(&self, scale: f64) -> Self {
        Self { noise_scale: scale, ..self.clone() }
    }

    pub fn with_schedule(&self, schedule: AttackSchedule) -> Self {
        Self { schedule, ..self.clone() }
    }

    /// Number of closed-loop samples.
    pub fn steps(&self) -> usize {
        (self.duration_minutes / self.sampling_minutes).round() as usize
    }

    pub fn mode_at_step(&self, k: usize) -> usize {
        self.schedule.mode_at(k as f64 * self.sampling_minutes).expect("schedule covers the run")
    }

    pub fn continuous_model(&self) -> Result<ContinuousModel> {
        linearize_channel(&self.pools, &self.operating_heads)
    }

    pub fn sampled_model(&self) -> Result<SampledModel> {
        discretize_with_delays(&self.continuous_model()?, self.sampling_minutes)
    }

    /// The sampled system with scaled noise and the initial belief.
    pub fn system(&self) -> Result<LinearGaussianSystem<f64>> {
        let model = self.sampled_model()?;
        let n = model.n();
        let mut x0_mean = DVector::zeros(n);
        let mut x0_cov = DMatrix::zeros(n, n);
        for i in 0..model.levels {
            x0_mean[i] = self.initial_levels[i];
            x0_cov[(i, i)] = self.initial_level_variance * self.noise_scale;
        }
        let hw = DMatrix::identity(n, n) * (self.process_noise * self.noise_scale);
        let hv = DMatrix::identity(2, 2) * (self.measurement_noise * self.noise_scale);
        model.into_system(hw, hv, x0_mean, x0_cov)
    }

    pub fn modes(&self) -> Result<ModeSet<f64>> {
        let b = self.sampled_model()?.b;
        enumerate_modes(&b, &DVector::from_vec(self.priors.clone()))
    }

    pub fn weights(&self) -> Result<ControlWeights<f64>> {
        ControlWeights::new(matrix_from_rows("Q", &self.q)?, matrix_from_rows("R", &self.r)?)
    }

    /// `(G_x, G_u, g)`: levels at most the cap, heads non-negative.
    pub fn constraint_matrices(&self, n: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let p = GATES.len();
        let rows = 2 + p;
        let mut gx = DMatrix::zeros(rows, n);
        let mut gu = DMatrix::zeros(rows, p);
        let mut g = DVector::zeros(rows);
        for i in 0..2 {
            gx[(i, i)] = 1.0;
            g[i] = self.level_cap;
        }
        for j in 0..p {
            gu[(2 + j, j)] = -1.0;
        }
        (gx, gu, g)
    }

    pub fn stacked_reference(&self) -> DVector<f64> {
        DVector::from_fn(2 * (self.horizon + 1), |i, _| self.reference[i % 2])
    }

    /// Design problem for one window, built from `sys`'s current initial belief.
    pub fn problem(
        &self,
        kind: Formulation,
        sys: &LinearGaussianSystem<f64>,
        modes: &ModeSet<f64>,
    ) -> Result<ProblemSpec<f64>> {
        let control = build_control_objective(sys, modes, &self.stacked_reference(), &self.weights()?, self.horizon)?;
        let detection = build_detection_bound(sys, modes, self.horizon)?;
        let (gx, gu, g) = self.constraint_matrices(sys.n());
        let constraints = expand_constraints(sys, modes, &gx, &gu, &g, self.horizon)?;
        ProblemSpec::new(kind, control, detection, constraints, self.jd_max, self.jc_max)
    }

    pub fn solver_options(&self, seed: u64) -> SolverOptions {
        SolverOptions {
            restarts: self.solver.restarts,
            max_outer: self.solver.max_outer,
            max_inner: self.solver.max_inner,
            seed,
            ..SolverOptions::default()
        }
    }
}

/// One closed-loop sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub minute: f64,
    pub window: usize,
    pub true_mode: usize,
    pub level_9: f64,
    pub level_10: f64,
    /// Largest expected level over all modes, from the window design.
    pub expected_level_9: f64,
    pub expected_level_10: f64,
    pub head_8: f64,
    pub head_9: f64,
    pub head_10: f64,
    pub decision: Option<usize>,
    pub decision_detector: Option<usize>,
}

/// One detection window of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    pub start_step: usize,
    pub steps: usize,
    pub status: SolveStatus,
    /// The design failed and zero input was applied.
    pub failed: bool,
    pub design_jc: f64,
    pub design_jd: f64,
    /// `Σ ‖y_k − r‖²_Q + ‖u_k‖²_R` over the applied steps.
    pub realized_jc: f64,
    pub constraint_violation: f64,
    pub restarts_used: usize,
}

/// Detection latency for one schedule segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub segment: usize,
    pub mode: usize,
    pub start_minute: f64,
    pub end_minute: f64,
    /// Minutes from segment start to the first decision naming its mode.
    pub latency_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub formulation: Formulation,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub windows: Vec<WindowRecord>,
    pub latencies: Vec<LatencyRecord>,
}

impl ExperimentLog {
    pub fn realized_jc(&self) -> f64 {
        self.windows.iter().map(|w| w.realized_jc).sum()
    }

    /// Detection bound of the applied inputs, summed over windows.
    pub fn applied_jd(&self) -> f64 {
        self.windows.iter().map(|w| w.design_jd).sum()
    }

    pub fn failed_windows(&self) -> usize {
        self.windows.iter().filter(|w| w.failed).count()
    }

    pub fn max_expected_level(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.expected_level_9.max(s.expected_level_10))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_head(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.head_8.min(s.head_9).min(s.head_10))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Noise shared by every formulation run with the same seed.
struct NoiseDraw {
    x0: DVector<f64>,
    w: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
}

fn draw_noise(sys: &LinearGaussianSystem<f64>, steps: usize, seed: u64) -> Result<NoiseDraw> {
    let sampler = RolloutSampler::new(sys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = sampler.sample_initial(&mut rng);
    let mut w = Vec::with_capacity(steps);
    let mut v = Vec::with_capacity(steps);
    for _ in 0..steps {
        v.push(sampler.sample_measurement_noise(&mut rng));
        w.push(sampler.sample_process_noise(&mut rng));
    }
    Ok(NoiseDraw { x0, w, v })
}

/// Runs the scheduled attack scenario with one formulation.
///
/// Noise depends only on `seed`, so runs of different formulations are directly comparable.
pub fn run_closed_loop(scenario: &ChannelScenario, kind: Formulation, seed: u64) -> Result<ExperimentLog> {
    scenario.validate()?;
    let base = scenario.system()?;
    let modes = scenario.modes()?;
    let weights = scenario.weights()?;
    let (p, n_win, steps) = (base.p(), scenario.horizon, scenario.steps());
    let ts = scenario.sampling_minutes;
    let reference = DVector::from_vec(scenario.reference.clone());
    let noise = draw_noise(&base, steps, seed)?;

    let mut bank = DetectorBank::new(n_win, &modes, &Belief::of_system(&base))?;
    let mut belief = Belief::of_system(&base);
    let mut x = noise.x0.clone();
    let mut step_log = Vec::with_capacity(steps);
    let mut windows = Vec::new();

    for (window, start) in (0..steps).step_by(n_win).enumerate() {
        let len = n_win.min(steps - start);
        let sys = base.with_initial_belief(belief.mean.clone(), belief.cov.clone())?;
        let spec = scenario.problem(kind, &sys, &modes)?;
        let opts = scenario.solver_options(seed.wrapping_mul(1_000_003).wrapping_add(window as u64));
        let report = solve(&spec, &opts)?;
        let sol = report.solution;
        let failed = !sol.status.is_accepted();
        if failed {
            log::warn!("{kind} seed {seed} window {window}: {:?}, applying zero input", sol.status);
        }
        // gates cannot push a negative head; this only trims solver round-off
        let u = if failed { DVector::zeros(spec.dim()) } else { sol.u_star.map(|v| v.max(0.0)) };

        let mut expected = DVector::from_element(2 * (n_win + 1), f64::NEG_INFINITY);
        for i in 0..modes.len() {
            let y = output_mean_map(&sys, &modes.input_matrices()[i], n_win).apply(&u);
            expected.zip_apply(&y, |e, v| *e = e.max(v));
        }

        let mut realized = 0.0;
        for j in 0..len {
            let k = start + j;
            let mode = scenario.mode_at_step(k);
            let uk = u.rows(j * p, p).into_owned();
            let y = base.c() * &x + &noise.v[k];
            let e = &y - &reference;
            realized += (e.transpose() * weights.q() * &e)[0] + (uk.transpose() * weights.r() * &uk)[0];
            let out = bank.step(&base, &y, &uk)?;
            step_log.push(StepRecord {
                k,
                minute: k as f64 * ts,
                window,
                true_mode: mode,
                level_9: y[0],
                level_10: y[1],
                expected_level_9: expected[2 * j],
                expected_level_10: expected[2 * j + 1],
                head_8: uk[0],
                head_9: uk[1],
                head_10: uk[2],
                decision: out.decision.map(|d| d.mode),
                decision_detector: out.decision.map(|d| d.detector),
            });
            x = base.a() * &x + &modes.input_matrices()[mode] * &uk + &noise.w[k];
        }
        windows.push(WindowRecord {
            window,
            start_step: start,
            steps: len,
            status: sol.status,
            failed,
            design_jc: spec.control.eval(&u),
            design_jd: spec.detection.eval(&u),
            realized_jc: realized,
            constraint_violation: spec.constraints.max_violation(&u),
            restarts_used: sol.restarts_used,
        });
        belief = bank.detector(0).belief();
    }

    let latencies = scenario
        .schedule
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let latency = step_log
                .iter()
                .filter(|s| s.minute >= seg.start && s.minute < seg.end)
                .find(|s| s.decision == Some(seg.mode))
                .map(|s| s.minute - seg.start);
            LatencyRecord { segment: i, mode: seg.mode, start_minute: seg.start, end_minute: seg.end, latency_minutes: latency }
        })
        .collect();
    Ok(ExperimentLog { formulation: kind, seed, steps: step_log, windows, latencies })
}

/// Worker pool sized by [`THREADS_ENV`] (default: all cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Runs every seed on the worker pool; results are in seed order.
pub fn run_batch(scenario: &ChannelScenario, kind: Formulation, seeds: &[u64]) -> Result<Vec<ExperimentLog>> {
    worker_pool()?.install(|| seeds.par_iter().map(|&s| run_closed_loop(scenario, kind, s)).collect())
}

/// One row of the normalized comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub formulation: Formulation,
    pub seeds: usize,
    /// Mean over seeds of realized `J_c` divided by the pure-control run's.
    pub mean_normalized_jc: f64,
    /// Mean over seeds of applied `Ĵ_d` divided by the pure-control run's.
    pub mean_normalized_jd: f64,
    pub failed_windows: usize,
    pub mean_latency_minutes: Option<f64>,
    pub max_expected_level: f64,
    pub min_head: f64,
}

/// Normalizes `runs` seed-by-seed against `baseline` (the pure-control runs).
pub fn summarize(baseline: &[ExperimentLog], runs: &[ExperimentLog]) -> Result<SummaryRow> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to summarize"))?;
    let mut jc = 0.0;
    let mut jd = 0.0;
    for run in runs {
        let base = baseline
            .iter()
            .find(|b| b.seed == run.seed)
            .ok_or_else(|| Error::invalid(format!("no baseline run for seed {}", run.seed)))?;
        jc += run.realized_jc() / base.realized_jc();
        jd += run.applied_jd() / base.applied_jd();
    }
    let count = runs.len() as f64;
    let lat: Vec<f64> = runs.iter().flat_map(|r| r.latencies.iter().filter_map(|l| l.latency_minutes)).collect();
    Ok(SummaryRow {
        formulation: first.formulation,
        seeds: runs.len(),
        mean_normalized_jc: jc / count,
        mean_normalized_jd: jd / count,
        failed_windows: runs.iter().map(ExperimentLog::failed_windows).sum(),
        mean_latency_minutes: (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64),
        max_expected_level: runs.iter().map(ExperimentLog::max_expected_level).fold(f64::NEG_INFINITY, f64::max),
        min_head: runs.iter().map(ExperimentLog::min_head).fold(f64::INFINITY, f64::min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Vec<PoolParameters> {
        vec![
            PoolParameters::new(8, 0.0208, 0.0278, 6.0).unwrap(),
            PoolParameters::new(9, 0.0700, 0.0614, 3.0).unwrap(),
            PoolParameters::new(10, 0.0142, 0.0156, 16.0).unwrap(),
        ]
    }

    #[test]
    fn jacobian_entries() {
        let m = linearize_channel(&table(), &[1.0; 3]).unwrap();
        let b = m.undelayed_b();
        assert!((b[(0, 1)] + 0.0921).abs() < 1e-12);
        let mut doubled = table();
        doubled[1].alpha_out *= 2.0;
        let b2 = linearize_channel(&doubled, &[1.0; 3]).unwrap().undelayed_b();
        assert!((b2[(0, 1)] - 2.0 * b[(0, 1)]).abs() < 1e-15);
        assert!(linearize_channel(&table(), &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_delay_is_plain_zoh() {
        let m = linearize_channel(&table(), &[1.0; 3]).unwrap().without_delays();
        let d = discretize_with_delays(&m, 10.0).unwrap();
        assert_eq!(d.n(), 2);
        assert!((&d.a - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!((&d.b - m.undelayed_b() * 10.0).amax() < 1e-12);
    }

    #[test]
    fn pipeline_sizes() {
        let m = linearize_channel(&table(), &[1.0; 3]).unwrap();
        let d = discretize_with_delays(&m, 10.0).unwrap();
        assert_eq!(d.pipeline, vec![(0, 1), (1, 1), (2, 1), (2, 2)]);
        assert_eq!(d.n(), 6);
        // gate 10 with τ = 1.6 samples: 4 min on u_{k-1}, 6 min on u_{k-2}
        let g = -1.5 * 0.0156;
        assert!((d.a[(1, 4)] - 4.0 * g).abs() < 1e-12);
        assert!((d.a[(1, 5)] - 6.0 * g).abs() < 1e-12);
        assert_eq!(d.b[(1, 2)], 0.0);
    }

    #[test]
    fn schedule_coverage() {
        let s = ChannelScenario::haughton();
        assert_eq!(s.steps(), 70);
        assert_eq!(s.mode_at_step(0), 0);
        assert_eq!(s.mode_at_step(8), 7);
        assert_eq!(s.mode_at_step(30), 1);
        assert_eq!(s.schedule.mode_at(700.0), Some(0));
        for minute in 0..=700 {
            assert!(s.schedule.segment_at(minute as f64).is_some());
        }
        let gap = vec![Segment { start: 0.0, end: 10.0, mode: 0 }, Segment { start: 20.0, end: 700.0, mode: 0 }];
        assert!(AttackSchedule::new(gap, 700.0).is_err());
    }
}
