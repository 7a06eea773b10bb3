//! Norm-constrained optimal control of the Schlögl model: value, active
//! set, and the constraint-inactivity time.

use parastab::mesh::{BoundaryCondition, SpatialMesh};
use parastab::model::{Actuator, AdmissibleSet, ControlOperator, Nonlinearity, ProblemSpec};
use parastab::optimize::solve_ocp;
use parastab::verify::inactivity_time;

fn main() -> parastab::Result<()> {
    let mesh = SpatialMesh::unit(1, 64, BoundaryCondition::Neumann)?;
    let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)])?;
    let shape = mesh.sample(|p| 1.0 + 0.5 * (std::f64::consts::PI * p[0]).cos());
    let y0 = shape.scaled(0.05 / mesh.norm_h1(&shape));
    let spec = ProblemSpec::builder(mesh)
        .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
        .control(b)
        .alpha(0.1)
        .admissible(AdmissibleSet::new(0.13)?)
        .horizon(10.0, 0.005)
        .y0(y0)
        .build()?;

    let r = solve_ocp(&spec, None)?;
    println!(
        "J = {:.6e} after {} iterations (converged {}), residual {:.1e}",
        r.cost, r.iterations, r.converged, r.residual
    );
    println!("active fraction {:.1}%, max |u| {:.4}", 100.0 * r.active_fraction, r.ubar.max_norm());
    match inactivity_time(&r, &spec) {
        Some(t) => println!("constraint inactive after t = {t:.3}"),
        None => println!("constraint stays active until the horizon"),
    }
    Ok(())
}
