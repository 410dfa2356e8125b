use std::collections::BTreeMap;

use l2a_ot::ot::{
    cosine_cost_matrix, energy_distance, energy_distance_node, exact_ot_bruteforce, sinkhorn, CostMatrix,
    SinkhornSettings,
};
use l2a_ot::tensor::{Graph, Session, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum over all permutations (Heap's algorithm), divided by n.
fn assignment_oracle(c: &[f64], n: usize) -> f64 {
    fn heap(k: usize, p: &mut Vec<usize>, c: &[f64], n: usize, best: &mut f64) {
        if k == 1 {
            let v: f64 = p.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
            *best = best.min(v);
            return;
        }
        for i in 0..k {
            heap(k - 1, p, c, n, best);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            p.swap(j, k - 1);
        }
    }
    let mut best = f64::INFINITY;
    heap(n, &mut (0..n).collect(), c, n, &mut best);
    best / n as f64
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
    CostMatrix::from_values(n, m, (0..n * m).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
}

#[test]
fn bruteforce_agrees_with_heap_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=5 {
        for _ in 0..10 {
            let c = random_cost(&mut rng, n, n);
            let want = assignment_oracle(c.values(), n);
            assert!((exact_ot_bruteforce(&c).unwrap() - want).abs() < 1e-12);
        }
    }
    let zero = CostMatrix::from_values(3, 3, vec![0.0; 9]).unwrap();
    assert_eq!(exact_ot_bruteforce(&zero).unwrap(), 0.0);
    let swap = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(exact_ot_bruteforce(&swap).unwrap(), 0.0);
}

#[test]
fn zero_cost_diagonal_is_found() {
    let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let sol = sinkhorn(&c, &SinkhornSettings::relative(0.01).with_iterations(5000, 1e-12));
    assert!((sol.plan.get(0, 0) - 0.5).abs() < 1e-6);
    assert!((sol.plan.get(1, 1) - 0.5).abs() < 1e-6);
    assert!(sol.sharp_cost < 1e-6);
}

#[test]
fn single_point_and_entropic_limit() {
    let c = CostMatrix::from_values(1, 1, vec![0.7]).unwrap();
    let sol = sinkhorn(&c, &SinkhornSettings::default());
    assert_eq!(sol.plan.values(), &[1.0]);
    assert_eq!(sol.sharp_cost, 0.7);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = random_cost(&mut rng, 3, 5);
    let sol = sinkhorn(&c, &SinkhornSettings::absolute(1e7));
    for v in sol.plan.values() {
        assert!((v - 1.0 / 15.0).abs() < 1e-6);
    }
}

#[test]
fn sharp_cost_gradient_is_the_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = random_cost(&mut rng, 3, 4);
    let s = SinkhornSettings::default();
    let mut g = Graph::new();
    let cv = g.input_with_grad("c", &[3, 4]);
    let w = g.sinkhorn_cost(cv, &s).unwrap();
    let ct = Tensor::new(&[3, 4], c.values().to_vec()).unwrap();
    let mut sess = Session::new(&g);
    sess.forward(&BTreeMap::from([("c".to_string(), ct)])).unwrap();
    let grad = sess.backward(w).unwrap().input("c").unwrap().clone();
    let plan = sinkhorn(&c, &s).plan;
    assert_eq!(grad.data(), plan.values());
}

#[test]
fn regularized_value_derivative_is_the_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = SinkhornSettings::absolute(0.1).with_iterations(50_000, 1e-15);
    for (n, m) in [(3, 3), (2, 4), (4, 3)] {
        let c = random_cost(&mut rng, n, m);
        let plan = sinkhorn(&c, &s).plan;
        for i in 0..n {
            for j in 0..m {
                let h = 1e-5;
                let bump = |d: f64| {
                    let mut v = c.values().to_vec();
                    v[i * m + j] += d;
                    sinkhorn(&CostMatrix::from_values(n, m, v).unwrap(), &s).regularized_value
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let mij = plan.get(i, j);
                assert!((fd - mij).abs() <= 1e-4 * mij.abs().max(1.0), "{fd} vs {mij}");
            }
        }
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, center: [f64; 3], spread: f64) -> Tensor {
    let data = (0..n * 3)
        .map(|k| center[k % 3] + spread * rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(&[n, 3], data).unwrap()
}

fn exact_energy(a: &Tensor, a2: &Tensor, b: &Tensor, b2: &Tensor) -> f64 {
    let w = |x: &Tensor, y: &Tensor| exact_ot_bruteforce(&cosine_cost_matrix(x, y).unwrap()).unwrap();
    2.0 * w(a, b) - w(a, a2) - w(b, b2)
}

#[test]
fn energy_distance_properties() {
    let s = SinkhornSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = cloud(&mut rng, 4, [1.0, 0.2, 0.0], 0.3);
    assert_eq!(energy_distance(&x, &x, &x, &x, &s).unwrap(), 0.0);

    let (a, a2) = (
        cloud(&mut rng, 4, [1.0, 0.0, 0.0], 0.2),
        cloud(&mut rng, 4, [1.0, 0.0, 0.0], 0.2),
    );
    let (far, far2) = (
        cloud(&mut rng, 4, [0.0, 1.0, 0.0], 0.2),
        cloud(&mut rng, 4, [0.0, 1.0, 0.0], 0.2),
    );
    let (near, near2) = (
        cloud(&mut rng, 4, [1.0, 0.1, 0.0], 0.2),
        cloud(&mut rng, 4, [1.0, 0.1, 0.0], 0.2),
    );
    let ab = energy_distance(&a, &a2, &far, &far2, &s).unwrap();
    let ba = energy_distance(&far, &far2, &a, &a2, &s).unwrap();
    assert!((ab - ba).abs() <= 1e-12);
    let overlap = energy_distance(&a, &a2, &near, &near2, &s).unwrap();
    assert!(ab > overlap);
    assert!(exact_energy(&a, &a2, &far, &far2) > exact_energy(&a, &a2, &near, &near2));
}

#[test]
fn identical_features_have_zero_gradient() {
    let s = SinkhornSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = cloud(&mut rng, 4, [0.5, 0.5, 0.1], 0.4);
    let mut g = Graph::new();
    let xv = g.input_with_grad("x", &[4, 3]);
    let e = energy_distance_node(&mut g, xv, xv, xv, xv, &s).unwrap();
    let mut sess = Session::new(&g);
    sess.forward(&BTreeMap::from([("x".to_string(), x)])).unwrap();
    assert_eq!(sess.value(e).unwrap().item(), 0.0);
    let grad = sess.backward(e).unwrap().input("x").unwrap().clone();
    let worst = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-12, "{worst}");
}

fn square_cost() -> impl Strategy<Value = CostMatrix> {
    (2usize..=5).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| CostMatrix::from_values(n, n, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_is_near_optimal_and_feasible(c in square_cost()) {
        let exact = exact_ot_bruteforce(&c).unwrap();
        let sol = sinkhorn(&c, &SinkhornSettings::relative(0.01));
        prop_assert!(sol.sharp_cost >= exact - 1e-9);
        prop_assert!(sol.sharp_cost - exact <= 0.02 * exact.abs().max(1e-3));
        prop_assert!(sol.plan.marginal_violation < 1e-6);
        prop_assert!(sol.plan.values().iter().all(|&v| v >= 0.0));
        prop_assert!((sol.plan.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_the_point_sets_transposes_the_plan(
        n in 1usize..5, m in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_cost(&mut rng, n, m);
        let s = SinkhornSettings::default();
        let ab = sinkhorn(&c, &s);
        let ba = sinkhorn(&c.transposed(), &s);
        prop_assert_eq!(ab.sharp_cost.to_bits(), ba.sharp_cost.to_bits());
        for i in 0..n {
            for j in 0..m {
                prop_assert_eq!(ab.plan.get(i, j).to_bits(), ba.plan.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn cosine_cost_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = cloud(&mut rng, 3, [0.0; 3], 1.0);
        let b = cloud(&mut rng, 4, [0.0; 3], 1.0);
        let c = cosine_cost_matrix(&a, &b).unwrap();
        prop_assert!(c.values().iter().all(|&v| (-1e-12..=2.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn energy_distance_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = SinkhornSettings::default();
        let x: Vec<Tensor> = (0..4).map(|_| cloud(&mut rng, 3, [0.3, 0.1, 0.0], 1.0)).collect();
        let ab = energy_distance(&x[0], &x[1], &x[2], &x[3], &s).unwrap();
        let ba = energy_distance(&x[2], &x[3], &x[0], &x[1], &s).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
    }
}
