//! The feedback law realized by receding-horizon re-solves, compared with
//! the open-loop optimum, plus the pointwise fixed-point certificate.

use parastab::config::ExperimentConfig;
use parastab::optimize::solve_ocp;
use parastab::verify::{feedback_closed_loop, fixed_point_certificate};

fn main() -> parastab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/schlogl_1d.json");
    let spec = ExperimentConfig::load(path.as_ref())?.to_spec()?;
    let base = solve_ocp(&spec, None)?;
    for every in [spec.steps() / 10, spec.steps() / 40] {
        let r = feedback_closed_loop(&spec, &base, every)?;
        println!(
            "re-solve every {every} steps: {} solves, closed loop {:.6e} vs open loop {:.6e} (gap {:.1e})",
            r.resolves, r.closed_loop_cost, r.open_loop_cost, r.relative_gap
        );
    }
    let cert = fixed_point_certificate(&spec, &base, 6)?;
    print!("{}", cert.summary());
    Ok(())
}
