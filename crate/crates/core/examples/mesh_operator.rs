//! Finite-difference Laplacian on Neumann and Dirichlet grids: mass
//! self-adjointness, the leading eigenvalue, and the discrete norms.

use parastab::mesh::{assemble_operator, leading_eigenvalue, BoundaryCondition, SpatialMesh};

fn main() -> parastab::Result<()> {
    for bc in [BoundaryCondition::Neumann, BoundaryCondition::Dirichlet] {
        let mesh = SpatialMesh::unit(1, 64, bc)?;
        // the shift c moves the spectrum: A = Laplacian + c
        let op = assemble_operator(&mesh, 1.0);
        let u = mesh.sample(|p| (std::f64::consts::PI * p[0]).sin());
        let v = mesh.sample(|p| p[0] * p[0]);
        let defect = mesh.dot(&op.apply(&u), &v) - mesh.dot(&u, &op.apply(&v));
        println!(
            "{bc:?}: nodes {}, leading eigenvalue {:.6}, |u|_L2 {:.6}, |u|_H1 {:.6}, symmetry defect {defect:.1e}",
            mesh.node_count(),
            leading_eigenvalue(&op)?,
            mesh.norm_l2(&u),
            mesh.norm_h1(&u),
        );
    }
    let square = SpatialMesh::unit(2, 16, BoundaryCondition::Neumann)?;
    println!("2D grid: {} nodes", square.node_count());
    Ok(())
}
