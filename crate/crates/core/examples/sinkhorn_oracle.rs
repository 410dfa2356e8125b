//! Compares entropic Sinkhorn against the exact assignment optimum on random
//! square cost matrices, for a few values of the regularizer.

use l2a_ot::ot::{exact_ot_bruteforce, sinkhorn, CostMatrix, SinkhornSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> l2a_ot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let costs: Vec<CostMatrix> = (0..20)
        .map(|k| {
            let n = 2 + k % 4;
            CostMatrix::from_values(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect())
        })
        .collect::<l2a_ot::Result<_>>()?;
    println!("{:>8} {:>12} {:>12} {:>8}", "eps", "mean gap", "max gap", "iters");
    for eps in [0.5, 0.1, 0.03, 0.01] {
        let s = SinkhornSettings::relative(eps);
        let (mut sum, mut max, mut iters) = (0.0f64, 0.0f64, 0);
        for c in &costs {
            let exact = exact_ot_bruteforce(c)?;
            let sol = sinkhorn(c, &s);
            let gap = (sol.sharp_cost - exact) / exact.max(1e-12);
            sum += gap;
            max = max.max(gap);
            iters += sol.plan.iterations;
        }
        println!(
            "{eps:>8} {:>12.3e} {max:>12.3e} {:>8}",
            sum / costs.len() as f64,
            iters / costs.len()
        );
    }
    Ok(())
}
