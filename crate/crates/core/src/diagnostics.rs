//! Finite-difference gradient suite and invariant self-test, shared by the
//! `gradcheck` and `selftest` subcommands.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::idx::{decode_images, encode_images, IdxImages};
use crate::data::{generate_glyph_dataset, GlyphSpec};
use crate::error::Result;
use crate::nets::{
    Binding, ClassifierSpec, CriticSpec, CriticWeights, DomainCode, GeneratorSpec, GeneratorWeights,
    TaskClassifierWeights, Weights,
};
use crate::ot::{
    energy_distance, energy_distance_node_as, exact_ot_bruteforce, sinkhorn, CostMatrix, SinkhornSettings,
    TransportValue,
};
use crate::tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use crate::train::{loss_ce_generated, loss_cycle};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest relative gradient error, or another check-specific figure.
    pub metric: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<32} {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.metric
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, so kinks of relu / l1 / max are not
/// straddled by the difference step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

struct Case {
    g: Graph,
    inputs: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            g: Graph::new(),
            inputs: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn leaf(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.g.input_with_grad(name, t.shape());
        self.inputs.insert(name.to_string(), t);
        v
    }

    fn rand(&mut self, name: &str, shape: &[usize]) -> Var {
        let t = uniform(&mut self.rng, shape, -1.0, 1.0);
        self.leaf(name, t)
    }

    fn kinky(&mut self, name: &str, shape: &[usize]) -> Var {
        let t = off_zero(&mut self.rng, shape);
        self.leaf(name, t)
    }

    /// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar
    /// with a non-trivial gradient.
    fn project(&mut self, out: Var) -> Result<Var> {
        let shape = self.g.shape(out).to_vec();
        let r = uniform(&mut self.rng, &shape, -1.0, 1.0);
        let c = self.g.constant(r);
        let m = self.g.mul(out, c)?;
        Ok(self.g.sum(m))
    }

    fn check(self, name: &str, loss: Var, tolerance: f64) -> Result<CheckResult> {
        let opts = GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        };
        let rep = grad_check(&self.g, loss, &self.inputs, &opts)?;
        Ok(CheckResult {
            name: name.to_string(),
            passed: rep.passed,
            metric: rep.max_rel_error(),
        })
    }
}

type Builder = fn(&mut Case) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |c| {
            let (a, b) = (c.rand("a", &[3, 4]), c.rand("b", &[3, 4]));
            let o = c.g.add(a, b)?;
            c.project(o)
        }),
        ("sub", |c| {
            let (a, b) = (c.rand("a", &[3, 4]), c.rand("b", &[3, 4]));
            let o = c.g.sub(a, b)?;
            c.project(o)
        }),
        ("mul", |c| {
            let (a, b) = (c.rand("a", &[3, 4]), c.rand("b", &[3, 4]));
            let o = c.g.mul(a, b)?;
            c.project(o)
        }),
        ("scale", |c| {
            let a = c.rand("a", &[5]);
            let o = c.g.scale(a, -2.5);
            c.project(o)
        }),
        ("matmul", |c| {
            let (a, b) = (c.rand("a", &[3, 5]), c.rand("b", &[5, 2]));
            let o = c.g.matmul(a, b)?;
            c.project(o)
        }),
        ("relu", |c| {
            let a = c.kinky("a", &[4, 5]);
            let o = c.g.relu(a);
            c.project(o)
        }),
        ("tanh", |c| {
            let a = c.rand("a", &[4, 5]);
            let o = c.g.tanh(a);
            c.project(o)
        }),
        ("sum", |c| {
            let a = c.rand("a", &[2, 3, 2]);
            let s = c.g.sum(a);
            c.g.mul(s, s)
        }),
        ("mean", |c| {
            let a = c.rand("a", &[2, 3, 2]);
            let s = c.g.mean(a);
            c.g.mul(s, s)
        }),
        ("reshape", |c| {
            let a = c.rand("a", &[2, 6]);
            let o = c.g.reshape(a, &[3, 4])?;
            c.project(o)
        }),
        ("broadcast_to", |c| {
            let a = c.rand("a", &[3]);
            let o = c.g.broadcast_to(a, &[2, 4, 3])?;
            c.project(o)
        }),
        ("concat_channels", |c| {
            let (a, b) = (c.rand("a", &[2, 1, 3, 3]), c.rand("b", &[2, 2, 3, 3]));
            let o = c.g.concat_channels(&[a, b])?;
            c.project(o)
        }),
        ("concat_rows", |c| {
            let (a, b) = (c.rand("a", &[2, 3]), c.rand("b", &[1, 3]));
            let o = c.g.concat_rows(&[a, b])?;
            c.project(o)
        }),
        ("slice_rows", |c| {
            let a = c.rand("a", &[5, 3]);
            let o = c.g.slice_rows(a, 1, 4)?;
            c.project(o)
        }),
        ("conv2d", |c| {
            let x = c.rand("x", &[2, 3, 5, 5]);
            let w = c.rand("w", &[4, 3, 3, 3]);
            let b = c.rand("b", &[4]);
            let o = c.g.conv2d(x, w, Some(b), 1, 1)?;
            c.project(o)
        }),
        ("conv2d_stride2", |c| {
            let x = c.rand("x", &[2, 2, 6, 6]);
            let w = c.rand("w", &[3, 2, 3, 3]);
            let o = c.g.conv2d(x, w, None, 2, 1)?;
            c.project(o)
        }),
        ("conv_transpose2d", |c| {
            let x = c.rand("x", &[2, 3, 3, 3]);
            let w = c.rand("w", &[3, 2, 3, 3]);
            let b = c.rand("b", &[2]);
            let o = c.g.conv_transpose2d(x, w, Some(b), 2, 1, 1)?;
            c.project(o)
        }),
        ("max_pool2x2", |c| {
            let x = c.rand("x", &[2, 2, 4, 4]);
            let o = c.g.max_pool2x2(x)?;
            c.project(o)
        }),
        ("instance_norm", |c| {
            let x = c.rand("x", &[2, 3, 3, 3]);
            let gain = c.rand("gain", &[3]);
            let bias = c.rand("bias", &[3]);
            let o = c.g.instance_norm(x, gain, bias, 1e-5)?;
            c.project(o)
        }),
        ("global_avg_pool", |c| {
            let x = c.rand("x", &[2, 3, 2, 4]);
            let o = c.g.global_avg_pool(x)?;
            c.project(o)
        }),
        ("linear", |c| {
            let x = c.rand("x", &[4, 3]);
            let w = c.rand("w", &[3, 2]);
            let b = c.rand("b", &[2]);
            let o = c.g.linear(x, w, b)?;
            c.project(o)
        }),
        ("softmax_cross_entropy", |c| {
            let x = c.rand("logits", &[4, 5]);
            c.g.softmax_cross_entropy(x, &[0, 3, 4, 1])
        }),
        ("l1_loss", |c| {
            let a = c.rand("a", &[3, 4]);
            let t = off_zero(&mut c.rng, &[3, 4]);
            let shifted = Tensor::new(
                &[3, 4],
                c.inputs["a"].data().iter().zip(t.data()).map(|(x, d)| x + d).collect(),
            )?;
            let b = c.leaf("b", shifted);
            c.g.l1_loss(a, b)
        }),
        ("cosine_cost", |c| {
            let (a, b) = (c.rand("a", &[3, 4]), c.rand("b", &[2, 4]));
            let o = c.g.cosine_cost(a, b)?;
            c.project(o)
        }),
        ("sinkhorn_regularized", |c| {
            let cost = uniform(&mut c.rng, &[4, 3], 0.0, 2.0);
            let v = c.leaf("cost", cost);
            c.g.sinkhorn_regularized(v, &danskin_settings())
        }),
    ]
}

/// Absolute ε and a tight tolerance, so the plan is the exact optimizer of
/// the regularized problem to near machine precision.
pub fn danskin_settings() -> SinkhornSettings {
    SinkhornSettings::absolute(0.2).with_iterations(20_000, 1e-14)
}

fn tiny_generator(seed: u64, size_domains: usize) -> GeneratorWeights {
    let spec = GeneratorSpec {
        image_channels: 3,
        num_domains: size_domains,
        widths: [2, 3, 4],
    };
    let mut g = GeneratorWeights::init(&spec, seed);
    // the real initialization zeroes the output conv, which would hide every
    // inner gradient from the check
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in g.params_mut().iter_mut() {
        if name.starts_with("out.") || name.ends_with(".bias") || name.ends_with(".gain") {
            *t = uniform(&mut rng, t.shape(), -0.5, 0.5);
        }
    }
    g
}

fn composed_cases(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let codes = |idx: &[usize], len: usize| -> Result<Vec<DomainCode>> {
        idx.iter().map(|&i| DomainCode::new(i, len)).collect()
    };

    // cycle: l1(G(G(x, k̃), k), x); both applications share parameters
    {
        let mut c = Case::new(seed + 100);
        let gen = tiny_generator(seed, 4);
        let x = uniform(&mut c.rng, &[2, 3, 8, 8], -1.0, 1.0);
        let xv = c.g.input("x", x.shape());
        c.inputs.insert("x".into(), x);
        let b = Binding::trainable("g.");
        let fwd = gen.forward(&mut c.g, &b, xv, &codes(&[2, 3], 4)?)?;
        let loss = loss_cycle(&mut c.g, &gen, &b, fwd, xv, &codes(&[0, 1], 4)?)?;
        out.push(c.check("cycle_loss(generator)", loss, 1e-4)?);
    }

    // semantic: CE of a frozen classifier on generated images
    {
        let mut c = Case::new(seed + 200);
        let gen = tiny_generator(seed + 1, 4);
        let yhat = TaskClassifierWeights::init(
            &ClassifierSpec {
                image_channels: 3,
                image_size: 16,
                width: 3,
                classes: 10,
            },
            seed,
        )?;
        let x = uniform(&mut c.rng, &[2, 3, 16, 16], -1.0, 1.0);
        let xv = c.g.input("x", x.shape());
        c.inputs.insert("x".into(), x);
        let fwd = gen.forward(&mut c.g, &Binding::trainable("g."), xv, &codes(&[2, 3], 4)?)?;
        let loss = loss_ce_generated(&mut c.g, &yhat, fwd, &[3, 7])?;
        out.push(c.check("ce_generated(generator)", loss, 1e-4)?);
    }

    // transport path: energy distance of critic features, regularized value
    {
        let mut c = Case::new(seed + 300);
        let gen = tiny_generator(seed + 2, 4);
        let phi = CriticWeights::init(
            &CriticSpec {
                image_channels: 3,
                widths: [3, 4, 5],
                embed_dim: 6,
                domains: 2,
            },
            seed,
        );
        let x = uniform(&mut c.rng, &[4, 3, 8, 8], -1.0, 1.0);
        let xv = c.g.input("x", x.shape());
        c.inputs.insert("x".into(), x);
        let fwd = gen.forward(&mut c.g, &Binding::trainable("g."), xv, &codes(&[2, 2, 3, 3], 4)?)?;
        let pb = Binding::frozen("phi.");
        let fg = phi.embed(&mut c.g, &pb, fwd)?;
        let fr = phi.embed(&mut c.g, &pb, xv)?;
        let (g1, g2) = (c.g.slice_rows(fg, 0, 2)?, c.g.slice_rows(fg, 2, 4)?);
        let (r1, r2) = (c.g.slice_rows(fr, 0, 2)?, c.g.slice_rows(fr, 2, 4)?);
        let loss = energy_distance_node_as(
            &mut c.g,
            g1,
            g2,
            r2,
            r1,
            &danskin_settings(),
            TransportValue::Regularized,
        )?;
        out.push(c.check("energy_distance(generator)", loss, 1e-4)?);
    }
    Ok(out)
}

/// Every graph op and the composed generator objectives against central
/// differences at relative tolerance `1e-4`.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, (name, build)) in op_cases().into_iter().enumerate() {
        let mut c = Case::new(seed.wrapping_add(i as u64));
        let loss = build(&mut c)?;
        out.push(c.check(name, loss, 1e-4)?);
    }
    out.extend(composed_cases(seed)?);
    Ok(out)
}

/// Quick invariant checks: transport oracle, energy-distance identities,
/// IDX round trip, dataset determinism, and the gradient suite.
pub fn selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..20 {
        let n = rng.random_range(2..=5);
        let c = CostMatrix::from_values(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let exact = exact_ot_bruteforce(&c)?;
        let sol = sinkhorn(&c, &SinkhornSettings::relative(0.01));
        let rel = (sol.sharp_cost - exact).abs() / exact.abs().max(1e-12);
        ok &= sol.sharp_cost >= exact - 1e-9 && rel <= 0.02 && sol.plan.marginal_violation < 1e-6;
        worst = worst.max(rel);
    }
    out.push(CheckResult {
        name: "sinkhorn_vs_bruteforce".into(),
        passed: ok,
        metric: worst,
    });

    let s = SinkhornSettings::default();
    let a = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[6, 4], 0.5, 1.5);
    let (a1, a2) = (a.slice_rows(0, 3)?, a.slice_rows(3, 6)?);
    let (b1, b2) = (b.slice_rows(0, 3)?, b.slice_rows(3, 6)?);
    let zero = energy_distance(&a1, &a1, &a1, &a1, &s)?;
    let ab = energy_distance(&a1, &a2, &b1, &b2, &s)?;
    let ba = energy_distance(&b1, &b2, &a1, &a2, &s)?;
    out.push(CheckResult {
        name: "energy_distance_identities".into(),
        passed: zero == 0.0 && (ab - ba).abs() <= 1e-12,
        metric: (ab - ba).abs(),
    });

    let img = IdxImages {
        count: 3,
        rows: 5,
        cols: 4,
        pixels: (0..60).map(|_| rng.random()).collect(),
    };
    let back = decode_images(&encode_images(&img)?)?;
    out.push(CheckResult {
        name: "idx_round_trip".into(),
        passed: back == img,
        metric: 0.0,
    });

    let spec = GlyphSpec {
        n_per_class: 20,
        image_size: 16,
        seed,
    };
    let same = generate_glyph_dataset(&spec)?.digest() == generate_glyph_dataset(&spec)?.digest();
    out.push(CheckResult {
        name: "dataset_determinism".into(),
        passed: same,
        metric: 0.0,
    });

    out.extend(gradient_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in gradient_suite(7).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
    }
}
