//! Tiny instances solved twice: by the adjoint-based solver and by a dense
//! forward-sensitivity projected gradient that shares only the data.

use parastab::config::ExperimentConfig;
use parastab::mesh::Field;
use parastab::model::random_smooth_field;
use parastab::optimize::solve_ocp;
use parastab::verify::brute_force_value;
use rand::SeedableRng;

fn main() -> parastab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json");
    let spec = ExperimentConfig::load(path.as_ref())?.to_spec()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for i in 0..4 {
        let y0: Field = random_smooth_field(spec.mesh(), &mut rng, 4).scaled(0.2);
        let s = spec.with_y0(y0)?;
        let solver = solve_ocp(&s, None)?;
        let oracle = brute_force_value(&s, 2, i)?;
        println!(
            "instance {i}: solver {:.12e}, oracle {:.12e}, rel gap {:.1e}",
            solver.cost,
            oracle.value,
            (solver.cost - oracle.value).abs() / oracle.value
        );
    }
    Ok(())
}
