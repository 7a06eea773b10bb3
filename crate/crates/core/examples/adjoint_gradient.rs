//! The adjoint-based reduced gradient against a central difference of the
//! cost along a random control direction.

use parastab::forward::{solve_state, ControlTrajectory};
use parastab::mesh::{BoundaryCondition, SpatialMesh};
use parastab::model::{Actuator, ControlOperator, Nonlinearity, ProblemSpec};
use parastab::optimize::{cost, reduced_gradient};
use rand::{Rng, SeedableRng};

fn main() -> parastab::Result<()> {
    let mesh = SpatialMesh::unit(1, 32, BoundaryCondition::Neumann)?;
    let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)])?;
    let y0 = mesh.sample(|p| 0.1 * (std::f64::consts::PI * p[0]).cos() + 0.05);
    let spec = ProblemSpec::builder(mesh)
        .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
        .control(b)
        .alpha(0.1)
        .horizon(2.0, 0.01)
        .y0(y0)
        .build()?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let u = ControlTrajectory::new(spec.dt(), (0..spec.steps()).map(|_| vec![rng.gen_range(-0.1..0.1)]).collect());
    let w = ControlTrajectory::new(spec.dt(), (0..spec.steps()).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect());
    let g = reduced_gradient(&spec, &u)?;
    let exact = g.inner(&w);
    let j = |s: f64| -> parastab::Result<f64> {
        let v = u.add_scaled(s, &w);
        Ok(cost(&spec, &solve_state(&spec, &v)?, &v))
    };
    for eps in [1e-2, 1e-3, 1e-4] {
        let fd = (j(eps)? - j(-eps)?) / (2.0 * eps);
        println!("eps {eps:.0e}: fd {fd:.10e}, adjoint {exact:.10e}, rel error {:.2e}", (fd - exact).abs() / exact.abs());
    }
    Ok(())
}
