//! `V'(y0) = -p(0)` against central differences of the value along random
//! smooth directions.

use parastab::config::ExperimentConfig;
use parastab::verify::{gradient_fd_check, GradCheckOptions};

fn main() -> parastab::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/schlogl_1d.json");
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let spec = cfg.to_spec()?;
    let dirs = cfg.grad_directions(spec.mesh());
    let opts = GradCheckOptions { tol: 3e-11, relative_step: true, ..GradCheckOptions::default() };
    let report = gradient_fd_check(&spec, &dirs, &opts)?;
    print!("{}", report.summary());
    print!("{}", report.tables["fd"].to_csv());
    Ok(())
}
