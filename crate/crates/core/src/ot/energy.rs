use std::collections::BTreeMap;

use super::{cosine_cost_matrix, sinkhorn, SinkhornSettings};
use crate::error::Result;
use crate::tensor::{Graph, Session, Tensor, Var};

/// Sharp Sinkhorn distance between two feature batches under cosine cost.
pub fn wasserstein(fa: &Tensor, fb: &Tensor, s: &SinkhornSettings) -> Result<f64> {
    Ok(sinkhorn(&cosine_cost_matrix(fa, fb)?, s).sharp_cost)
}

/// Generalized squared energy distance
/// `2·W(a, b) − W(a, a′) − W(b, b′)` from one draw of each batch.
pub fn energy_distance(xa: &Tensor, xa2: &Tensor, xb: &Tensor, xb2: &Tensor, s: &SinkhornSettings) -> Result<f64> {
    let cross = wasserstein(xa, xb, s)?;
    let within_a = wasserstein(xa, xa2, s)?;
    let within_b = wasserstein(xb, xb2, s)?;
    Ok(2.0 * cross - (within_a + within_b))
}

/// Which scalar a transport node reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportValue {
    Sharp,
    Regularized,
}

/// Graph form of [`wasserstein`]; gradients reach both feature batches.
pub fn wasserstein_node(g: &mut Graph, fa: Var, fb: Var, s: &SinkhornSettings) -> Result<Var> {
    wasserstein_node_as(g, fa, fb, s, TransportValue::Sharp)
}

pub fn wasserstein_node_as(g: &mut Graph, fa: Var, fb: Var, s: &SinkhornSettings, v: TransportValue) -> Result<Var> {
    let c = g.cosine_cost(fa, fb)?;
    match v {
        TransportValue::Sharp => g.sinkhorn_cost(c, s),
        TransportValue::Regularized => g.sinkhorn_regularized(c, s),
    }
}

/// Graph form of [`energy_distance`], evaluated in the same order so both
/// routes agree bit for bit.
pub fn energy_distance_node(g: &mut Graph, xa: Var, xa2: Var, xb: Var, xb2: Var, s: &SinkhornSettings) -> Result<Var> {
    energy_distance_node_as(g, xa, xa2, xb, xb2, s, TransportValue::Sharp)
}

pub fn energy_distance_node_as(
    g: &mut Graph,
    xa: Var,
    xa2: Var,
    xb: Var,
    xb2: Var,
    s: &SinkhornSettings,
    v: TransportValue,
) -> Result<Var> {
    let cross = wasserstein_node_as(g, xa, xb, s, v)?;
    let within_a = wasserstein_node_as(g, xa, xa2, s, v)?;
    let within_b = wasserstein_node_as(g, xb, xb2, s, v)?;
    let twice = g.scale(cross, 2.0);
    let within = g.add(within_a, within_b)?;
    g.sub(twice, within)
}

/// Sharp distance and its gradients with respect to both feature batches,
/// holding the transport plan fixed.
pub fn transport_gradient(fa: &Tensor, fb: &Tensor, s: &SinkhornSettings) -> Result<(f64, Tensor, Tensor)> {
    let mut g = Graph::new();
    let a = g.input_with_grad("a", fa.shape());
    let b = g.input_with_grad("b", fb.shape());
    let w = wasserstein_node(&mut g, a, b, s)?;
    let mut sess = Session::new(&g);
    let inputs = BTreeMap::from([("a".to_string(), fa.clone()), ("b".to_string(), fb.clone())]);
    sess.forward(&inputs)?;
    let value = sess.value(w).map(Tensor::item).unwrap_or_default();
    let grads = sess.backward(w)?;
    Ok((
        value,
        grads.input("a").cloned().unwrap_or_else(|| Tensor::zeros(fa.shape())),
        grads.input("b").cloned().unwrap_or_else(|| Tensor::zeros(fb.shape())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, center: &[f64], spread: f64) -> Tensor {
        let d = center.len();
        let data = (0..n * d)
            .map(|k| center[k % d] + spread * (rng.random::<f64>() - 0.5))
            .collect();
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn identical_batches_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 4, &[1.0, 0.5, -0.2], 1.0);
        let s = SinkhornSettings::default();
        assert_eq!(energy_distance(&x, &x, &x, &x, &s).unwrap(), 0.0);
    }

    #[test]
    fn graph_route_matches_plain_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Tensor> = (0..4).map(|_| cloud(&mut rng, 4, &[0.0, 1.0, 0.0], 2.0)).collect();
        let s = SinkhornSettings::default();
        let plain = energy_distance(&xs[0], &xs[1], &xs[2], &xs[3], &s).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..4).map(|i| g.input(&format!("x{i}"), &[4, 3])).collect();
        let e = energy_distance_node(&mut g, vars[0], vars[1], vars[2], vars[3], &s).unwrap();
        g.mark_output("e", e);
        let inputs = (0..4).map(|i| (format!("x{i}"), xs[i].clone())).collect();
        let out = crate::tensor::execute(&g, &inputs).unwrap();
        assert_eq!(out["e"].item().to_bits(), plain.to_bits());
    }
}
