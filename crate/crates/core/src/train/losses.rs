//! Graph builders for the generator and task objectives.
//!
//! Every energy-distance term halves its batches: the four batches of
//! `2·W(a, b) − W(a, a′) − W(b, b′)` are `a = P[..h]`, `a′ = P[h..]`,
//! `b = Q[h..]`, `b′ = Q[..h]`. With `P = Q` this is exactly zero.

use crate::error::{Error, Result};
use crate::nets::{Binding, DomainCode, GeneratorWeights, TaskClassifierWeights};
use crate::ot::{energy_distance_node, SinkhornSettings};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_domain: f64,
    pub lambda_cycle: f64,
    pub lambda_ce: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_domain: 1.0,
            lambda_cycle: 10.0,
            lambda_ce: 1.0,
            alpha: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_domain, self.lambda_cycle, self.lambda_ce, self.alpha];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || self.alpha > 1.0 {
            return Err(Error::InvalidArgument(format!("loss weights {self:?}")));
        }
        Ok(())
    }

    /// `−λ_d·(novel + diversity) + λ_c·cycle + λ_ce·ce`, in the same
    /// operation order as [`generator_loss`].
    pub fn combine(&self, novel: f64, diversity: f64, cycle: f64, ce: f64) -> f64 {
        let domain = (novel + diversity) * -self.lambda_domain;
        domain + cycle * self.lambda_cycle + ce * self.lambda_ce
    }

    /// `(1 − α)·real + α·generated`.
    pub fn blend(&self, real: f64, generated: f64) -> f64 {
        real * (1.0 - self.alpha) + generated * self.alpha
    }
}

fn halves(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let n = g.shape(x)[0];
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::shape("halves", format!("batch of {n} rows")));
    }
    Ok((g.slice_rows(x, 0, n / 2)?, g.slice_rows(x, n / 2, n)?))
}

/// Energy distance between two feature batches using the halving scheme.
pub fn paired_energy_distance(g: &mut Graph, p: Var, q: Var, s: &SinkhornSettings) -> Result<Var> {
    let (p1, p2) = halves(g, p)?;
    let (q1, q2) = halves(g, q)?;
    energy_distance_node(g, p1, p2, q2, q1, s)
}

/// `Σ_k ED(φ(G(X_k, k̃)), φ(X_k))` from per-source feature batches.
pub fn loss_novel(g: &mut Graph, generated: &[Var], real: &[Var], s: &SinkhornSettings) -> Result<Var> {
    if generated.len() != real.len() || generated.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} generated vs {} real batches",
            generated.len(),
            real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in generated.iter().zip(real) {
        let d = paired_energy_distance(g, a, b, s)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Sum over unordered pairs of generated batches whose novel labels differ.
#[derive(Clone, Copy, Debug)]
pub struct Diversity {
    pub value: Option<Var>,
    pub pairs: usize,
}

impl Diversity {
    /// No pair of distinct novel labels was generated (e.g. `K_n = 1`).
    pub fn degenerate(&self) -> bool {
        self.pairs == 0
    }
}

pub fn loss_diversity(g: &mut Graph, generated: &[Var], novel: &[usize], s: &SinkhornSettings) -> Result<Diversity> {
    if generated.len() != novel.len() {
        return Err(Error::InvalidArgument("one novel label per generated batch".into()));
    }
    let mut value: Option<Var> = None;
    let mut pairs = 0;
    for i in 0..generated.len() {
        for j in i + 1..generated.len() {
            if novel[i] == novel[j] {
                continue;
            }
            let d = paired_energy_distance(g, generated[i], generated[j], s)?;
            value = Some(match value {
                Some(t) => g.add(t, d)?,
                None => d,
            });
            pairs += 1;
        }
    }
    Ok(Diversity { value, pairs })
}

/// Mean absolute error between `G(x̃, original codes)` and `x`, using the
/// same generator parameters as the forward translation.
pub fn loss_cycle(
    g: &mut Graph,
    gen: &GeneratorWeights,
    binding: &Binding<'_>,
    translated: Var,
    original: Var,
    codes: &[DomainCode],
) -> Result<Var> {
    let back = gen.forward(g, binding, translated, codes)?;
    g.l1_loss(back, original)
}

/// Cross-entropy of the frozen label predictor on generated images.
pub fn loss_ce_generated(g: &mut Graph, yhat: &TaskClassifierWeights, generated: Var, labels: &[usize]) -> Result<Var> {
    let (logits, _) = yhat.forward(g, &Binding::frozen("yhat."), generated)?;
    g.softmax_cross_entropy(logits, labels)
}

/// Generator objective components; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeneratorTerms {
    pub novel: Option<Var>,
    pub diversity: Option<Var>,
    pub cycle: Option<Var>,
    pub ce: Option<Var>,
}

/// `−λ_d·(L_novel + L_div) + λ_c·L_cycle + λ_ce·L_ce`.
pub fn generator_loss(g: &mut Graph, t: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    let zero = g.constant(crate::tensor::Tensor::scalar(0.0));
    let or_zero = |v: Option<Var>| v.unwrap_or(zero);
    let nd = g.add(or_zero(t.novel), or_zero(t.diversity))?;
    let domain = g.scale(nd, -w.lambda_domain);
    let cycle = g.scale(or_zero(t.cycle), w.lambda_cycle);
    let ce = g.scale(or_zero(t.ce), w.lambda_ce);
    let dc = g.add(domain, cycle)?;
    g.add(dc, ce)
}

/// Task objective on real and (detached) generated images.
pub struct TaskTerms {
    pub total: Var,
    pub real: Option<Var>,
    pub generated: Option<Var>,
}

/// `(1 − α)·CE(F(x), y) + α·CE(F(x̃), y)`. Real and generated rows share one
/// forward pass; a side with zero weight is not evaluated.
pub fn task_loss(
    g: &mut Graph,
    f: &TaskClassifierWeights,
    binding: &Binding<'_>,
    real: Var,
    generated: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<TaskTerms> {
    let n = labels.len();
    let use_real = alpha < 1.0;
    let use_gen = alpha > 0.0;
    let x = match (use_real, use_gen) {
        (true, true) => g.concat_rows(&[real, generated])?,
        (true, false) => real,
        _ => generated,
    };
    let (logits, _) = f.forward(g, binding, x)?;
    let mut offset = 0;
    let mut part = |g: &mut Graph, on: bool| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let l = if use_real && use_gen {
            g.slice_rows(logits, offset, offset + n)?
        } else {
            logits
        };
        offset += n;
        Ok(Some(g.softmax_cross_entropy(l, labels)?))
    };
    let real_ce = part(g, use_real)?;
    let gen_ce = part(g, use_gen)?;
    let zero = g.constant(crate::tensor::Tensor::scalar(0.0));
    let r = g.scale(real_ce.unwrap_or(zero), 1.0 - alpha);
    let q = g.scale(gen_ce.unwrap_or(zero), alpha);
    Ok(TaskTerms {
        total: g.add(r, q)?,
        real: real_ce,
        generated: gen_ce,
    })
}
