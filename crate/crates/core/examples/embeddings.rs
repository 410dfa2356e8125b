//! Trains a short L2A-OT run, embeds source, generated and target samples
//! with the domain critic and prints per-group centroids in PCA space.

use l2a_ot::config::ExperimentConfig;
use l2a_ot::eval::{export_embeddings, Experiment, Method};

fn main() -> l2a_ot::Result<()> {
    let mut overrides = vec!["train.iterations=200".to_string()];
    overrides.extend(std::env::args().skip(1));
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/benchmark.cfg");
    let cfg = ExperimentConfig::load(path, &overrides)?;
    let domains = cfg.build_domains()?;
    let mut exp = Experiment::new(&domains, &cfg)?;
    let target = cfg.targets[0];
    let (_, critic) = exp.pretrained(target, cfg.seeds[0])?;
    let cell = exp.run_cell(Method::L2aOt, target, cfg.seeds[0], None)?;
    let generator = cell.generator.expect("L2A-OT cell has a generator");
    let val = exp.source_val(target)?;
    let dump = export_embeddings(
        &critic.weights,
        &generator,
        &val,
        Some(&domains[target]),
        cfg.embedding_samples,
    )?;

    let mut tags: Vec<&str> = dump.rows.iter().map(|r| r.tag.as_str()).collect();
    tags.dedup();
    for tag in tags {
        let pts: Vec<[f64; 2]> = dump.rows.iter().filter(|r| r.tag == tag).map(|r| r.coords).collect();
        let n = pts.len() as f64;
        let (x, y) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0] / n, y + p[1] / n));
        println!("{tag:<12} n={:<4} centroid ({x:+.3}, {y:+.3})", pts.len());
    }
    let out = cfg.out_dir.join("embeddings.csv");
    dump.write_csv(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
