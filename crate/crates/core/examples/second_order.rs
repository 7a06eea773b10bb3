//! Curvature of the reduced problem at the optimum and the Lipschitz
//! dependence of the optimal triple on the initial datum.

use parastab::config::ExperimentConfig;
use parastab::optimize::{solve_ocp, Coordinates};
use parastab::verify::{lipschitz_probe, second_order_check, LipschitzOptions};

fn main() -> parastab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/schlogl_1d.json");
    let spec = ExperimentConfig::load(path.as_ref())?.to_spec()?;
    let base = solve_ocp(&spec, None)?;
    for coords in [Coordinates::Feedback, Coordinates::Control] {
        // open-loop sensitivities grow like exp(2 c T) on an unstable model,
        // so control coordinates can overflow where feedback ones do not
        match second_order_check(&spec, &base, 20, 0, coords) {
            Ok(r) => println!(
                "{coords:?}: kappa {:.4e}, largest Ritz value {:.4e}, symmetry defect {:.1e}",
                r.kappa,
                r.ritz.last().copied().unwrap_or(f64::NAN),
                r.symmetry_defect
            ),
            Err(e) => println!("{coords:?}: {e}"),
        }
    }
    let lip = lipschitz_probe(&spec, &base, &LipschitzOptions::default())?;
    print!("{}", lip.summary());
    Ok(())
}
