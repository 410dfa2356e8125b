//! Renders the configured glyph domains and prints per-domain statistics.
//! Pass `key=value` overrides, e.g. `domains.image_size=16`.

use l2a_ot::config::{ConfigMap, ExperimentConfig};

fn main() -> l2a_ot::Result<()> {
    let mut m = ConfigMap::default();
    for arg in std::env::args().skip(1) {
        m.set_pair(&arg)?;
    }
    let cfg = ExperimentConfig::from_map(&m)?;
    for ds in cfg.build_domains()? {
        let [r, g, b] = ds.channel_means();
        println!(
            "domain {}: {} images {}x{}, channel means ({r:+.3}, {g:+.3}, {b:+.3}), digest {}",
            ds.domain(),
            ds.len(),
            ds.image_size(),
            ds.image_size(),
            &ds.digest()[..12]
        );
        println!("  {}", ds.provenance());
    }
    Ok(())
}
