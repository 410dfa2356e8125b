//! OT energy distance between feature clouds as one cloud drifts away.

use l2a_ot::ot::{energy_distance, SinkhornSettings};
use l2a_ot::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize, angle: f64) -> l2a_ot::Result<Tensor> {
    let data = (0..n)
        .flat_map(|_| {
            let a = angle + rng.random_range(-0.3..0.3);
            [a.cos(), a.sin(), rng.random_range(-0.1..0.1)]
        })
        .collect();
    Tensor::new(&[n, 3], data)
}

fn main() -> l2a_ot::Result<()> {
    let s = SinkhornSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, a2) = (cloud(&mut rng, 16, 0.0)?, cloud(&mut rng, 16, 0.0)?);
    for step in 0..=6 {
        let angle = step as f64 * 0.25;
        let (b, b2) = (cloud(&mut rng, 16, angle)?, cloud(&mut rng, 16, angle)?);
        println!(
            "shift {angle:.2} rad  energy {:.4}",
            energy_distance(&a, &a2, &b, &b2, &s)?
        );
    }
    Ok(())
}
