use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Session, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Entries probed per leaf (all entries when the leaf is smaller).
    pub probes: usize,
    /// Step is `step_scale · (1 + |x|)`.
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            probes: 20,
            step_scale: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<ParamError>,
    pub step_scale: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn loss_at(graph: &Graph, loss: Var, inputs: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sess = Session::new(graph);
    sess.forward(inputs)?;
    Ok(sess.value(loss).map(Tensor::item).unwrap_or(f64::NAN))
}

fn with_entry(t: &Tensor, k: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[k] = v;
    Tensor::new(t.shape(), data)
        .expect("same shape")
        .with_requires_grad(t.requires_grad())
}

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences for every trainable parameter and every input declared with
/// gradient. Mismatches are reported, never raised.
pub fn grad_check(
    graph: &Graph,
    loss: Var,
    inputs: &BTreeMap<String, Tensor>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    let mut sess = Session::new(graph);
    sess.forward(inputs)?;
    let grads = sess.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();

    let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        if n <= opts.probes {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, opts.probes).into_vec();
            v.sort_unstable();
            v
        }
    };

    let params: Vec<(String, Tensor)> = graph
        .parameters()
        .filter(|(_, t)| t.requires_grad())
        .map(|(k, t)| (k.to_string(), t.clone()))
        .collect();
    for (name, value) in params {
        let analytic = grads.param(&name).expect("every parameter has a gradient");
        let mut worst: f64 = 0.0;
        let idx = pick(&mut rng, value.len());
        for &k in &idx {
            let x = value.data()[k];
            let h = opts.step_scale * (1.0 + x.abs());
            let mut gp = graph.clone();
            gp.set_param(&name, with_entry(&value, k, x + h));
            let fp = loss_at(&gp, loss, inputs)?;
            gp.set_param(&name, with_entry(&value, k, x - h));
            let fm = loss_at(&gp, loss, inputs)?;
            worst = worst.max(rel_error(analytic.data()[k], (fp - fm) / (2.0 * h)));
        }
        entries.push(ParamError {
            name,
            max_rel_error: worst,
            probes: idx.len(),
        });
    }

    let grad_inputs: Vec<String> = graph
        .input_names()
        .filter(|n| grads.input(n).is_some())
        .map(str::to_string)
        .collect();
    for name in grad_inputs {
        let value = &inputs[&name];
        let analytic = grads.input(&name).unwrap();
        let mut worst: f64 = 0.0;
        let idx = pick(&mut rng, value.len());
        let mut perturbed = inputs.clone();
        for &k in &idx {
            let x = value.data()[k];
            let h = opts.step_scale * (1.0 + x.abs());
            perturbed.insert(name.clone(), with_entry(value, k, x + h));
            let fp = loss_at(graph, loss, &perturbed)?;
            perturbed.insert(name.clone(), with_entry(value, k, x - h));
            let fm = loss_at(graph, loss, &perturbed)?;
            worst = worst.max(rel_error(analytic.data()[k], (fp - fm) / (2.0 * h)));
        }
        entries.push(ParamError {
            name,
            max_rel_error: worst,
            probes: idx.len(),
        });
    }

    let passed = entries.iter().all(|e| e.max_rel_error <= opts.tolerance);
    Ok(GradReport {
        entries,
        step_scale: opts.step_scale,
        tolerance: opts.tolerance,
        passed,
    })
}
