//! HJB residual at states along the optimal trajectory, in both the
//! continuous form and the form consistent with the time stepping.

use parastab::config::ExperimentConfig;
use parastab::mesh::Field;
use parastab::optimize::solve_ocp;
use parastab::verify::hjb_terms;

fn main() -> parastab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/schlogl_1d.json");
    let spec = ExperimentConfig::load(path.as_ref())?.to_spec()?;
    let base = solve_ocp(&spec, None)?;
    println!("{:>6} {:>12} {:>12} {:>12}", "t", "|y|_L2", "continuous", "consistent");
    for k in (0..spec.steps() / 2).step_by(spec.steps() / 20) {
        let y = Field::new(base.ybar.state(k).to_vec());
        let t = hjb_terms(&spec, &y)?;
        println!("{:>6.3} {:>12.4e} {:>12.3e} {:>12.3e}", k as f64 * spec.dt(), t.norm_l2_sq.sqrt(), t.continuous, t.consistent);
    }
    Ok(())
}
