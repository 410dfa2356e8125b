//! Leave-one-domain-out comparison of vanilla training, L2A-OT and its two
//! ablations on the desk-scale benchmark.

use l2a_ot::config::ExperimentConfig;
use l2a_ot::eval::{reports_csv, Experiment, Method};

fn main() -> l2a_ot::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/benchmark.cfg");
    let cfg = ExperimentConfig::load(path, &overrides)?;
    let domains = cfg.build_domains()?;
    let mut exp = Experiment::new(&domains, &cfg)?;
    let mut all = Vec::new();
    for m in Method::ALL {
        for r in exp.lodo(m, &cfg.targets)? {
            println!("{:<22} target {}: {:.2} ± {:.2}", m.name(), r.target, r.mean, r.std);
            all.push(r);
        }
    }
    print!("\n{}", reports_csv(&all));
    Ok(())
}
