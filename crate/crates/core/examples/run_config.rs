//! Library-level equivalent of `parastab <experiment> --config <path>`.
//!
//! ```text
//! cargo run --example run_config -- configs/quartic_1d.json solve
//! ```

use parastab::cli::{run_experiment, Experiment};
use parastab::config::ExperimentConfig;

fn main() -> parastab::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quartic_1d.json").into());
    let which = args.next().unwrap_or_else(|| "solve".into());
    let cfg = ExperimentConfig::load(path.as_ref())?;
    let exp = Experiment::SUITE
        .iter()
        .chain([Experiment::All].iter())
        .copied()
        .find(|e| e.name() == which)
        .ok_or_else(|| parastab::Error::Invalid(format!("unknown experiment {which}")))?;
    let outcome = run_experiment(&cfg, exp);
    print!("{}", outcome.report.summary());
    println!("exit code {}", outcome.exit_code());
    Ok(())
}
