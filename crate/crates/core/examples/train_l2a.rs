//! Trains one L2A-OT cell on the desk-scale benchmark and prints the loss
//! trajectory. Extra `key=value` arguments override the config.

use l2a_ot::config::ExperimentConfig;
use l2a_ot::eval::{Experiment, Method};

fn main() -> l2a_ot::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/benchmark.cfg");
    let cfg = ExperimentConfig::load(path, &overrides)?;
    let domains = cfg.build_domains()?;
    let mut exp = Experiment::new(&domains, &cfg)?;
    let (target, seed) = (cfg.targets[0], cfg.seeds[0]);
    let (yhat, critic) = exp.pretrained(target, seed)?;
    println!(
        "source-val accuracy: label predictor {:.1}, critic {:.1}",
        yhat.val_accuracy, critic.val_accuracy
    );

    let cell = exp.run_cell(Method::L2aOt, target, seed, None)?;
    if let Some(log) = &cell.log {
        let chunk = (log.len() / 10).max(1);
        println!(
            "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "iter", "novel", "divers", "cycle", "ce_gen", "f_real"
        );
        for start in (0..log.len()).step_by(chunk) {
            let end = (start + chunk).min(log.len());
            let m = |f: fn(&l2a_ot::train::IterRecord) -> f64| log.window_mean(start, end, f);
            println!(
                "{start:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                m(|r| r.l_novel),
                m(|r| r.l_diversity),
                m(|r| r.l_cycle),
                m(|r| r.l_ce_gen),
                m(|r| r.l_f_real)
            );
        }
    }
    println!("target accuracy {:.2}", cell.accuracy.unwrap_or(f64::NAN));
    Ok(())
}
