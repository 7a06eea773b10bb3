//! Riccati gain for the linearization, its closed-loop margin, the sampled
//! smallness radius, and nonlinear closed loops started inside it.

use parastab::mesh::{BoundaryCondition, SpatialMesh};
use parastab::model::{Actuator, AdmissibleSet, ControlOperator, Nonlinearity, ProblemSpec};
use parastab::stabilize::{closed_loop_trials, gain_for_spec, smallness_estimates, stability_margin, DEFAULT_DENSE_CAP};

fn main() -> parastab::Result<()> {
    let mesh = SpatialMesh::unit(1, 64, BoundaryCondition::Neumann)?;
    let b = ControlOperator::from_actuators(&mesh, &[Actuator::interval(0.0, 0.5)])?;
    let spec = ProblemSpec::builder(mesh.clone())
        .nonlinearity(Nonlinearity::Schlogl { a: -1.0, xi1: -1.0, xi2: 2.0 })
        .control(b)
        .alpha(0.1)
        .admissible(AdmissibleSet::new(0.13)?)
        .horizon(10.0, 0.005)
        .y0(parastab::mesh::Field::zeros(mesh.node_count()))
        .build()?;

    let gain = gain_for_spec(&spec, DEFAULT_DENSE_CAP)?;
    let open = stability_margin(spec.operator(), spec.control(), &[vec![0.0; mesh.node_count()]])?;
    println!("open-loop abscissa {open:.4}, closed-loop {:.4}, |K| {:.3}", gain.margin, gain.operator_norm());

    let small = smallness_estimates(&spec, &gain, 8, 0)?;
    println!("M_K {:.3}, C {:.3e}, delta1 {:?}", small.m_k, small.lipschitz_c, small.delta1);
    let radius = small.delta1.unwrap_or(1.0);
    let trials = closed_loop_trials(&spec, &gain, radius, 20, 0)?;
    let ok = trials.iter().filter(|t| t.tail_passed && t.feasible).count();
    println!("{ok}/{} closed loops decay and stay admissible", trials.len());
    Ok(())
}
