//! Discrete optimal transport between mini-batches: cosine costs, a
//! log-domain entropic solver, the four-batch energy distance and an
//! exhaustive permutation oracle.

mod energy;

pub use energy::{
    energy_distance, energy_distance_node, energy_distance_node_as, transport_gradient, wasserstein, wasserstein_node,
    wasserstein_node_as, TransportValue,
};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Cosine norms below this are clamped to it.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
const MEAN_COST_FLOOR: f64 = 1e-12;

/// `n × m` pairwise costs with uniform marginals `a = 1/n`, `b = 1/m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::shape(
                "cost_matrix",
                format!("{rows}x{cols} with {} values", values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("cost_matrix", "ragged rows"));
        }
        Self::from_values(n, m, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        vec![1.0 / self.rows as f64; self.rows]
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        vec![1.0 / self.cols as f64; self.cols]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn transposed(&self) -> Self {
        let mut v = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                v.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values: v,
        }
    }
}

/// Row-normalizes `x` (rows of length `d`); returns unit rows and raw norms.
pub(crate) fn normalized_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for row in x.chunks(d) {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = nrm.max(COSINE_NORM_FLOOR);
        u.extend(row.iter().map(|v| v / den));
        norms.push(nrm);
    }
    (u, norms)
}

/// `C_ij = 1 - <u_i, v_j>` from pre-normalized rows.
pub(crate) fn cosine_from_unit(ua: &[f64], ub: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut sim = vec![0.0; n * m];
    kernels::gemm(n, d, m, ua, false, ub, true, 0.0, &mut sim);
    sim.iter().map(|s| 1.0 - s).collect()
}

/// Cosine-distance cost between the rows of two `n×d` / `m×d` feature batches.
pub fn cosine_cost_matrix(fa: &Tensor, fb: &Tensor) -> Result<CostMatrix> {
    let (sa, sb) = (fa.shape(), fb.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("cosine_cost", format!("{sa:?} vs {sb:?}")));
    }
    let d = sa[1];
    let (ua, _) = normalized_rows(fa.data(), d);
    let (ub, _) = normalized_rows(fb.data(), d);
    CostMatrix::from_values(sa[0], sb[0], cosine_from_unit(&ua, &ub, sa[0], sb[0], d))
}

/// How the entropic regularization strength is interpreted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonScale {
    /// `epsilon · mean(C)`, evaluated per cost matrix.
    MeanCost,
    /// `epsilon` as given.
    Absolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSettings {
    pub epsilon: f64,
    pub scale: EpsilonScale,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            scale: EpsilonScale::MeanCost,
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

impl SinkhornSettings {
    pub fn relative(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn absolute(epsilon: f64) -> Self {
        Self {
            epsilon,
            scale: EpsilonScale::Absolute,
            ..Self::default()
        }
    }

    pub fn with_iterations(mut self, max_iterations: usize, tolerance: f64) -> Self {
        self.max_iterations = max_iterations;
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {}", self.epsilon)));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(format!(
                "tolerance {} / max_iterations {}",
                self.tolerance, self.max_iterations
            )));
        }
        Ok(())
    }

    /// Absolute regularization strength for a given cost matrix.
    pub fn epsilon_for(&self, c: &CostMatrix) -> f64 {
        match self.scale {
            EpsilonScale::Absolute => self.epsilon,
            EpsilonScale::MeanCost => self.epsilon * c.mean().max(MEAN_COST_FLOOR),
        }
    }
}

/// Nonnegative coupling of the two uniform marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    /// Largest row/column marginal error of the returned plan.
    pub marginal_violation: f64,
    /// Marginal error when the iterations stopped, before feasibility rounding.
    pub iteration_violation: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.values.chunks(self.cols) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn transposed(&self) -> Self {
        let mut v = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                v.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values: v,
            ..self.clone()
        }
    }
}

/// Result of [`sinkhorn`].
#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    /// `Σ M_ij C_ij`, the reported transport distance.
    pub sharp_cost: f64,
    /// `sharp_cost + ε Σ M_ij log(M_ij / (a_i b_j))`.
    pub regularized_value: f64,
    /// Absolute regularization strength used.
    pub epsilon: f64,
}

/// Entropic OT between uniform marginals by log-domain Sinkhorn iterations.
///
/// The problem is always solved in a canonical orientation (fewer rows than
/// columns, or the lexicographically smaller of `C` and `Cᵀ`), so swapping the
/// two point sets yields the transposed plan and a bit-identical cost. The
/// final plan is projected onto the exact marginals.
pub fn sinkhorn(c: &CostMatrix, s: &SinkhornSettings) -> SinkhornSolution {
    let ct = c.transposed();
    let flip = c.rows > c.cols || (c.rows == c.cols && lex_less(ct.values(), c.values()));
    let canon = if flip { &ct } else { c };
    let mut sol = solve_canonical(canon, s);
    if flip {
        sol.plan = sol.plan.transposed();
    }
    sol
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn solve_canonical(c: &CostMatrix, s: &SinkhornSettings) -> SinkhornSolution {
    let (n, m) = (c.rows, c.cols);
    let eps = s.epsilon_for(c);
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let (la, lb) = (a.ln(), b.ln());
    let cv = &c.values;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < s.max_iterations {
        iterations += 1;
        for i in 0..n {
            let row = &cv[i * m..(i + 1) * m];
            f[i] = eps * la - eps * log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) / eps));
        }
        for j in 0..m {
            g[j] = eps * lb - eps * log_sum_exp((0..n).map(|i| (f[i] - cv[i * m + j]) / eps));
        }
        violation = (0..n)
            .map(|i| {
                let r: f64 = (0..m).map(|j| ((f[i] + g[j] - cv[i * m + j]) / eps).exp()).sum();
                (r - a).abs()
            })
            .fold(0.0, f64::max);
        if violation < s.tolerance {
            break;
        }
    }
    let converged = violation < s.tolerance;
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = ((f[i] + g[j] - cv[i * m + j]) / eps).exp();
        }
    }
    round_to_marginals(&mut plan, n, m);

    let mut tp = TransportPlan {
        rows: n,
        cols: m,
        values: plan,
        marginal_violation: 0.0,
        iteration_violation: violation,
        iterations,
        converged,
    };
    let rv = tp.row_sums().iter().map(|r| (r - a).abs()).fold(0.0, f64::max);
    let cvio = tp.col_sums().iter().map(|r| (r - b).abs()).fold(0.0, f64::max);
    tp.marginal_violation = rv.max(cvio);

    let sharp_cost: f64 = tp.values.iter().zip(cv).map(|(p, c)| p * c).sum();
    let entropy: f64 = tp
        .values
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p / (a * b)).ln())
        .sum();
    SinkhornSolution {
        plan: tp,
        sharp_cost,
        regularized_value: sharp_cost + eps * entropy,
        epsilon: eps,
    }
}

/// Projects a nearly feasible positive plan onto the uniform marginals:
/// scale down over-full rows, then over-full columns, then spread the
/// remaining deficit as a rank-one correction.
fn round_to_marginals(p: &mut [f64], n: usize, m: usize) {
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    for i in 0..n {
        let r: f64 = p[i * m..(i + 1) * m].iter().sum();
        if r > a {
            let x = a / r;
            p[i * m..(i + 1) * m].iter_mut().for_each(|v| *v *= x);
        }
    }
    for j in 0..m {
        let c: f64 = (0..n).map(|i| p[i * m + j]).sum();
        if c > b {
            let y = b / c;
            (0..n).for_each(|i| p[i * m + j] *= y);
        }
    }
    let er: Vec<f64> = (0..n)
        .map(|i| (a - p[i * m..(i + 1) * m].iter().sum::<f64>()).max(0.0))
        .collect();
    let ec: Vec<f64> = (0..m)
        .map(|j| (b - (0..n).map(|i| p[i * m + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                p[i * m + j] += er[i] * ec[j] / total;
            }
        }
    }
}

/// Exact OT between uniform marginals of equal size by enumerating all
/// permutations (optimal plans of the assignment polytope are permutations).
pub fn exact_ot_bruteforce(c: &CostMatrix) -> Result<f64> {
    let n = c.rows;
    if n != c.cols || n > 6 {
        return Err(Error::InvalidArgument(format!(
            "brute-force OT needs square n <= 6, got {}x{}",
            c.rows, c.cols
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();
    // Heap's algorithm, iterative.
    let mut stack = vec![0usize; n];
    best = best.min(cost(&perm));
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(cost(&perm));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
        CostMatrix::from_values(n, m, (0..n * m).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Enumerates permutations recursively, independent of Heap's iteration.
    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_perms(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn cosine_cost_extremes() {
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![2.0, 0.0, 0.0, 3.0, -1.0, 0.0]).unwrap();
        let c = cosine_cost_matrix(&a, &b).unwrap();
        assert_eq!(c.values(), &[0.0, 1.0, 2.0]);
        assert!(cosine_cost_matrix(&a, &Tensor::new(&[1, 3], vec![0.0; 3]).unwrap()).is_err());
        // zero rows stay finite
        let z = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(cosine_cost_matrix(&z, &a).unwrap().values(), &[1.0]);
    }

    #[test]
    fn single_point() {
        let c = CostMatrix::from_values(1, 1, vec![0.7]).unwrap();
        let s = sinkhorn(&c, &SinkhornSettings::default());
        assert_eq!(s.plan.values(), &[1.0]);
        assert!((s.sharp_cost - 0.7).abs() < 1e-15);
    }

    #[test]
    fn small_epsilon_finds_diagonal() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(exact_ot_bruteforce(&c).unwrap(), 0.0);
        let s = sinkhorn(&c, &SinkhornSettings::relative(0.01).with_iterations(10_000, 1e-12));
        assert!((s.plan.get(0, 0) - 0.5).abs() < 1e-9);
        assert!((s.plan.get(1, 1) - 0.5).abs() < 1e-9);
        assert!(s.sharp_cost < 1e-9);
    }

    #[test]
    fn large_epsilon_gives_product_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cost(&mut rng, 3, 5);
        let s = sinkhorn(&c, &SinkhornSettings::relative(1e7).with_iterations(1000, 1e-14));
        for v in s.plan.values() {
            assert!((v - 1.0 / 15.0).abs() < 1e-6);
        }
    }

    #[test]
    fn plan_is_feasible_and_swap_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (n, m) = (rng.random_range(1..7), rng.random_range(1..7));
            let c = random_cost(&mut rng, n, m);
            let s = sinkhorn(&c, &SinkhornSettings::default());
            assert!(s.plan.values().iter().all(|&v| v >= 0.0));
            assert!((s.plan.mass() - 1.0).abs() < 1e-9);
            assert!(s.plan.marginal_violation < 1e-12);
            let t = sinkhorn(&c.transposed(), &SinkhornSettings::default());
            assert_eq!(s.sharp_cost.to_bits(), t.sharp_cost.to_bits());
        }
    }

    #[test]
    fn bruteforce_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            let c = random_cost(&mut rng, n, n);
            let expect = all_perms(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                / n as f64;
            assert!((exact_ot_bruteforce(&c).unwrap() - expect).abs() < 1e-15);
        }
        assert_eq!(
            exact_ot_bruteforce(&CostMatrix::from_values(3, 3, vec![0.0; 9]).unwrap()).unwrap(),
            0.0
        );
        assert!(exact_ot_bruteforce(&random_cost(&mut rng, 2, 3)).is_err());
        assert!(exact_ot_bruteforce(&random_cost(&mut rng, 7, 7)).is_err());
    }

    #[test]
    fn zero_cost_is_finite() {
        let c = CostMatrix::from_values(3, 3, vec![0.0; 9]).unwrap();
        let s = sinkhorn(&c, &SinkhornSettings::default());
        assert_eq!(s.sharp_cost, 0.0);
        assert!(s.plan.values().iter().all(|v| v.is_finite()));
    }
}
