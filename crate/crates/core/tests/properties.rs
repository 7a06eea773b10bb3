//! Property tests for the invariants the solvers rely on.

use nalgebra::DMatrix;
use parastab::adjoint::backward_linear;
use parastab::config::ExperimentConfig;
use parastab::forward::{solve_linearized, solve_state, ControlTrajectory};
use parastab::mesh::{assemble_operator, BoundaryCondition, Field, SpatialMesh};
use parastab::model::{project_ball, AdmissibleSet, Nonlinearity, ProblemSpec};
use parastab::optimize::cost;
use parastab::stabilize::solve_care;
use proptest::prelude::*;

fn bc() -> impl Strategy<Value = BoundaryCondition> {
    prop_oneof![Just(BoundaryCondition::Neumann), Just(BoundaryCondition::Dirichlet)]
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_in_the_ball_and_is_idempotent(v in vector(3), eta in 0.01..5.0f64) {
        let set = AdmissibleSet::new(eta).unwrap();
        let p = project_ball(&set, &v);
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm <= eta * (1.0 + 1e-12));
        prop_assert_eq!(project_ball(&set, &p), p.clone());
        let inside = v.iter().map(|x| x * x).sum::<f64>().sqrt() <= eta;
        if inside {
            prop_assert_eq!(p, v);
        }
    }

    #[test]
    fn projection_is_nonexpansive(a in vector(2), b in vector(2), eta in 0.01..5.0f64) {
        let set = AdmissibleSet::new(eta).unwrap();
        let (pa, pb) = (project_ball(&set, &a), project_ball(&set, &b));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(&pa, &pb) <= d(&a, &b) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn operator_is_self_adjoint_in_the_mass_product(
        n in 3usize..24, c in -5.0..5.0f64, bc in bc(), seed in vector(48),
    ) {
        let mesh = SpatialMesh::unit(1, n, bc).unwrap();
        let op = assemble_operator(&mesh, c);
        let u: Vec<f64> = seed[..n].to_vec();
        let v: Vec<f64> = seed[24..24 + n].to_vec();
        let lhs = mesh.dot(&op.apply(&u), &v);
        let rhs = mesh.dot(&u, &op.apply(&v));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn scalar_riccati_matches_closed_form(a in -3.0..3.0f64, b in 0.2..3.0f64, alpha in 0.05..2.0f64) {
        // 2aP - P^2 b^2/alpha + 1 = 0, positive root
        let exact = alpha * (a + (a * a + b * b / alpha).sqrt()) / (b * b);
        let m = |v| DMatrix::from_element(1, 1, v);
        let p = solve_care(&m(a), &m(b), &m(1.0), alpha).unwrap().p[(0, 0)];
        prop_assert!((p - exact).abs() <= 1e-9 * exact, "{} vs {}", p, exact);
    }

    #[test]
    fn linearized_and_adjoint_steps_are_transposes(seed in any::<u64>(), amp in 0.0..0.5f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mesh = SpatialMesh::unit(1, 10, BoundaryCondition::Neumann).unwrap();
        let y0 = mesh.sample(|p| amp * (std::f64::consts::PI * p[0]).cos());
        let spec = ProblemSpec::builder(mesh)
            .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
            .horizon(0.5, 0.05)
            .y0(y0)
            .build()
            .unwrap();
        let zeros = ControlTrajectory::zeros(spec.dt(), spec.steps(), 1);
        let ybar = solve_state(&spec, &zeros).unwrap();
        let mut noise = || -> Vec<Vec<f64>> {
            (0..spec.steps()).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let (r, q) = (noise(), noise());
        let v = solve_linearized(&spec, &ybar, &[0.0; 10], None, Some(&r)).unwrap();
        let z = backward_linear(&spec, Some(&ybar), &q, None).unwrap();
        let m = spec.mesh();
        let lhs: f64 = (1..=spec.steps()).map(|k| spec.dt() * m.dot(v.state(k), &q[k - 1])).sum();
        let rhs: f64 = (1..=spec.steps()).map(|k| spec.dt() * m.dot(&r[k - 1], z.state(k - 1))).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn cost_is_nonnegative_and_zero_only_at_rest(amp in -0.3..0.3f64, u in -1.0..1.0f64) {
        let mesh = SpatialMesh::unit(1, 8, BoundaryCondition::Neumann).unwrap();
        let spec = ProblemSpec::builder(mesh)
            .horizon(1.0, 0.1)
            .y0(Field::constant(8, amp))
            .build()
            .unwrap();
        let control = ControlTrajectory::new(spec.dt(), vec![vec![u]; spec.steps()]);
        let y = solve_state(&spec, &control).unwrap();
        let j = cost(&spec, &y, &control);
        prop_assert!(j >= 0.0);
        prop_assert_eq!(j == 0.0, amp == 0.0 && u == 0.0);
    }

    #[test]
    fn config_round_trips(alpha in 1e-3..10.0f64, seed in any::<u64>(), eta in prop::option::of(0.01..2.0f64)) {
        let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json")).unwrap();
        let mut cfg = ExperimentConfig::from_json(&text).unwrap();
        cfg.cost.alpha = alpha;
        cfg.seed = seed;
        cfg.control.eta = eta;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}
