//! Structural invariants on random systems.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asentinel::detector::{posterior_update, ModePosterior, POSTERIOR_FLOOR};
use asentinel::io::{mask_from_bits, mask_to_bits, SystemDocument};
use asentinel::model::{enumerate_modes, propagate_moments, ControlSequence, LinearGaussianSystem, ModeSet};
use asentinel::objectives::{
    build_control_objective, build_detection_bound, expand_constraints, state_mean_map, ControlWeights,
};
use asentinel::optimizer::{solve_pure_control, Formulation, ProblemSpec, SolveStatus};
use asentinel::oracle::{random_priors, random_spd, random_system};
use asentinel::scenario::{AttackSchedule, ChannelScenario, Segment};

struct Instance {
    sys: LinearGaussianSystem<f64>,
    modes: ModeSet<f64>,
    horizon: usize,
    rng: ChaCha8Rng,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p, m) = (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(1..=2));
    let horizon = rng.gen_range(1..=5);
    let sys = random_system(&mut rng, n, p, m).unwrap();
    let modes = enumerate_modes(sys.b(), &random_priors(&mut rng, 1 << p)).unwrap();
    Instance { sys, modes, horizon, rng }
}

fn random_input(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.gen_range(-scale..scale))
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_psd_and_independent_of_mode_and_input(seed in any::<u64>()) {
        let mut t = instance(seed);
        let p = t.sys.p();
        let u = ControlSequence::new(random_input(&mut t.rng, p * t.horizon, 3.0), p).unwrap();
        let zero = ControlSequence::zeros(p, t.horizon);
        let base = propagate_moments(&t.sys, &t.modes, 0, &zero).unwrap();
        prop_assert!(min_eigenvalue(&base.x_cov) >= -1e-9);
        prop_assert!(min_eigenvalue(&base.y_cov) >= -1e-9);
        for mode in 0..t.modes.len() {
            let mo = propagate_moments(&t.sys, &t.modes, mode, &u).unwrap();
            prop_assert!((&mo.x_cov - &base.x_cov).amax() <= 1e-12 * (1.0 + base.x_cov.amax()));
            prop_assert!((&mo.y_cov - &base.y_cov).amax() <= 1e-12 * (1.0 + base.y_cov.amax()));
        }
    }

    #[test]
    fn mean_is_affine_in_input(seed in any::<u64>(), mode_pick in 0usize..4) {
        let mut t = instance(seed);
        let (p, dim) = (t.sys.p(), t.sys.p() * t.horizon);
        let mode = mode_pick % t.modes.len();
        let (u1, u2) = (random_input(&mut t.rng, dim, 2.0), random_input(&mut t.rng, dim, 2.0));
        let mean = |u: DVector<f64>| {
            propagate_moments(&t.sys, &t.modes, mode, &ControlSequence::new(u, p).unwrap()).unwrap().x_mean
        };
        let m0 = mean(DVector::zeros(dim));
        let lhs = mean(&u1 + &u2) - &m0;
        let rhs = (mean(u1) - &m0) + (mean(u2) - &m0);
        prop_assert!((&lhs - &rhs).amax() <= 1e-9 * (1.0 + lhs.amax()));
    }

    #[test]
    fn attacked_columns_carry_no_input(seed in any::<u64>()) {
        let t = instance(seed);
        for mode in t.modes.iter() {
            for (j, &attacked) in mode.mask.iter().enumerate() {
                let col = mode.input_matrix.column(j);
                if attacked {
                    prop_assert!(col.amax() == 0.0);
                } else {
                    prop_assert_eq!(col.into_owned(), t.sys.b().column(j).into_owned());
                }
            }
        }
    }

    #[test]
    fn detection_bound_lies_in_unit_ceiling(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let mut t = instance(seed);
        let form = build_detection_bound(&t.sys, &t.modes, t.horizon).unwrap();
        let u = random_input(&mut t.rng, form.dim(), 1.0) * scale;
        let v = form.eval(&u);
        prop_assert!(v > 0.0 || scale > 0.0);
        prop_assert!(v >= 0.0 && v <= form.ceiling() * (1.0 + 1e-12));
        prop_assert!((form.eval(&DVector::zeros(form.dim())) - form.ceiling()).abs() <= 1e-12);
        // Σ_{i<j} √(P_i P_j) ≤ (M − 1)/2 for priors summing to one
        prop_assert!(form.ceiling() <= (t.modes.len() as f64 - 1.0) / 2.0 + 1e-12);
    }

    #[test]
    fn control_cost_is_convex_and_nonnegative(seed in any::<u64>()) {
        let mut t = instance(seed);
        let (p, m) = (t.sys.p(), t.sys.m());
        let weights = ControlWeights::new(random_spd(&mut t.rng, m, 1.0), random_spd(&mut t.rng, p, 0.5)).unwrap();
        let reference = random_input(&mut t.rng, m * (t.horizon + 1), 3.0);
        let form = build_control_objective(&t.sys, &t.modes, &reference, &weights, t.horizon).unwrap();
        let (a, b) = (random_input(&mut t.rng, form.dim(), 3.0), random_input(&mut t.rng, form.dim(), 3.0));
        let (ja, jb, jm) = (form.eval(&a), form.eval(&b), form.eval(&((&a + &b) * 0.5)));
        prop_assert!(ja >= 0.0 && jb >= 0.0);
        prop_assert!(jm <= 0.5 * (ja + jb) + 1e-9 * (1.0 + ja.abs() + jb.abs()));
    }

    #[test]
    fn expanded_constraints_match_modewise_expectations(seed in any::<u64>()) {
        let mut t = instance(seed);
        let (n, p) = (t.sys.n(), t.sys.p());
        let rows = 2;
        let gx = DMatrix::from_fn(rows, n, |_, _| t.rng.gen_range(-1.0..1.0));
        let gu = DMatrix::from_fn(rows, p, |_, _| t.rng.gen_range(-1.0..1.0));
        let g = DVector::from_fn(rows, |_, _| t.rng.gen_range(0.0..2.0));
        let c = expand_constraints(&t.sys, &t.modes, &gx, &gu, &g, t.horizon).unwrap();
        let u = random_input(&mut t.rng, p * t.horizon, 2.0);
        let mut worst = 0.0f64;
        for mode in t.modes.iter() {
            let x = state_mean_map(&t.sys, mode.input_matrix, t.horizon).apply(&u);
            for k in 0..=t.horizon {
                let mut lhs = &gx * x.rows(k * n, n);
                if k < t.horizon {
                    lhs += &gu * u.rows(k * p, p);
                }
                worst = (lhs - &g).iter().fold(worst, |w, &v| w.max(v));
            }
        }
        prop_assert!((c.max_violation(&u) - worst).abs() <= 1e-9 * (1.0 + worst.abs()));
        prop_assert_eq!(c.len(), rows * (t.horizon + 1) * t.modes.len());
    }

    #[test]
    fn pure_control_solution_is_feasible_and_optimal_among_samples(seed in any::<u64>()) {
        let mut t = instance(seed);
        let (p, m) = (t.sys.p(), t.sys.m());
        let weights = ControlWeights::new(random_spd(&mut t.rng, m, 1.0), random_spd(&mut t.rng, p, 0.5)).unwrap();
        let reference = random_input(&mut t.rng, m * (t.horizon + 1), 3.0);
        let control = build_control_objective(&t.sys, &t.modes, &reference, &weights, t.horizon).unwrap();
        let detection = build_detection_bound(&t.sys, &t.modes, t.horizon).unwrap();
        let mut gu = DMatrix::zeros(2 * p, p);
        for i in 0..p {
            gu[(2 * i, i)] = 1.0;
            gu[(2 * i + 1, i)] = -1.0;
        }
        let c = expand_constraints(&t.sys, &t.modes, &DMatrix::zeros(2 * p, t.sys.n()), &gu, &DVector::from_element(2 * p, 1.0), t.horizon).unwrap();
        let spec = ProblemSpec::new(Formulation::PureControl, control, detection, c, 1.0, f64::INFINITY).unwrap();
        let sol = solve_pure_control(&spec).unwrap();
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        prop_assert!(spec.constraints.max_violation(&sol.u_star) <= 1e-9);
        for _ in 0..20 {
            let u = random_input(&mut t.rng, spec.dim(), 1.0);
            prop_assert!(spec.control.eval(&u) >= sol.objective_value - 1e-9 * (1.0 + sol.objective_value.abs()));
        }
    }

    #[test]
    fn posterior_stays_normalized_and_floored(seed in any::<u64>(), shift in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = 4;
        let mut probs = random_priors(&mut rng, count);
        probs[3] = 0.0;
        probs /= probs.sum();
        let post = ModePosterior::new(probs).unwrap();
        let innovations: Vec<_> = (0..count)
            .map(|i| (DVector::from_element(1, shift * i as f64), DMatrix::identity(1, 1)))
            .collect();
        let next = posterior_update(&post, &innovations).unwrap().posterior;
        prop_assert!((next.probs().sum() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(next.probs()[3], 0.0);
        for i in 0..3 {
            prop_assert!(next.probs()[i] >= POSTERIOR_FLOOR * 0.5);
        }
    }

    #[test]
    fn mask_bits_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..8)) {
        prop_assert_eq!(mask_from_bits(&mask_to_bits(&bits)).unwrap(), bits);
    }

    #[test]
    fn system_document_round_trip(seed in any::<u64>()) {
        let t = instance(seed);
        let text = SystemDocument::from_model(&t.sys, &t.modes).to_json();
        let loaded = SystemDocument::from_json(&text).unwrap().load().unwrap();
        prop_assert_eq!(loaded.system, t.sys);
        prop_assert_eq!(loaded.modes, t.modes);
    }

    #[test]
    fn schedule_assigns_one_mode_to_every_minute(cuts in proptest::collection::btree_set(1u32..399, 0..6), minute in 0.0f64..=400.0) {
        let mut edges: Vec<f64> = std::iter::once(0.0).chain(cuts.iter().map(|&c| c as f64)).collect();
        edges.push(400.0);
        let segments = edges.windows(2).enumerate().map(|(i, w)| Segment { start: w[0], end: w[1], mode: i % 8 }).collect();
        let schedule = AttackSchedule::new(segments, 400.0).unwrap();
        let i = schedule.segment_at(minute).unwrap();
        let seg = schedule.segments[i];
        prop_assert!(seg.start <= minute && minute <= seg.end);
        prop_assert!(schedule.segments.iter().filter(|s| s.start <= minute && minute < s.end).count() <= 1);
    }
}

#[test]
fn shipped_schedule_covers_the_run() {
    let s = ChannelScenario::haughton();
    for k in 0..s.steps() {
        assert!(s.mode_at_step(k) < 8);
    }
    assert!(s.schedule.validate(s.duration_minutes).is_ok());
}
