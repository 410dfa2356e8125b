//! Target accuracy as a function of the number of novel domains.

use l2a_ot::config::ExperimentConfig;
use l2a_ot::eval::{sweep_csv, Experiment};

fn main() -> l2a_ot::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/benchmark.cfg");
    let cfg = ExperimentConfig::load(path, &overrides)?;
    let domains = cfg.build_domains()?;
    let rows = Experiment::new(&domains, &cfg)?.kn_sweep(&cfg.kn_values(), &cfg.targets)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
