//! Schlögl dynamics from a small bump. Without control the unstable
//! reaction carries the state to the stable level `y = 2`; a constant
//! control on one actuator only shifts where it settles. Neither run passes
//! the tail check, which is what the feedback in `riccati_feedback` fixes.

use parastab::forward::{solve_state, tail_check, trajectory_norms, ControlTrajectory};
use parastab::mesh::{BoundaryCondition, SpatialMesh};
use parastab::model::{Actuator, AdmissibleSet, ControlOperator, Nonlinearity, ProblemSpec};

fn main() -> parastab::Result<()> {
    let mesh = SpatialMesh::unit(1, 64, BoundaryCondition::Neumann)?;
    let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)])?;
    let y0 = mesh.sample(|p| 0.05 * (1.0 + (std::f64::consts::PI * p[0]).cos()));
    let spec = ProblemSpec::builder(mesh)
        .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
        .control(b)
        .admissible(AdmissibleSet::unconstrained())
        .horizon(5.0, 0.01)
        .y0(y0)
        .build()?;

    for level in [0.0, -0.2] {
        let u = ControlTrajectory::new(spec.dt(), vec![vec![level]; spec.steps()]);
        match solve_state(&spec, &u) {
            Ok(y) => {
                let norms = trajectory_norms(&y, spec.operator());
                let tail = tail_check(spec.mesh(), &y, 1e-3);
                println!(
                    "u = {level:+.1}: |y(T)|_H1 {:.3e}, |y|_W {:.3e}, tail check passed: {}",
                    tail.final_h1, norms.w_norm, tail.passed
                );
            }
            Err(e) => println!("u = {level:+.1}: {e}"),
        }
    }
    Ok(())
}
