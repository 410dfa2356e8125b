use std::collections::BTreeMap;

use super::{sub_seed, SgdConfig, SgdState};
use crate::data::{BatchSampler, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::{argmax_predictions, evaluate_accuracy};
use crate::nets::{Binding, ClassifierSpec, CriticSpec, CriticWeights, TaskClassifierWeights, Weights};
use crate::tensor::{Graph, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_per_source: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_per_source: 8,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained<W> {
    pub weights: W,
    /// Percent accuracy on the source validation splits.
    pub val_accuracy: f64,
    pub final_loss: f64,
}

const PREFIX: &str = "m.";

/// SGD on pooled per-source batches; `target` maps (source position, class
/// labels) to the training targets.
fn fit<W: Weights>(
    mut w: W,
    sources: &[DomainDataset],
    cfg: &PretrainConfig,
    target: impl Fn(usize, &[usize]) -> Vec<usize>,
    logits: impl Fn(&W, &mut Graph, &Binding<'_>, Var) -> Result<Var>,
) -> Result<(W, f64)> {
    let mut samplers = sources
        .iter()
        .enumerate()
        .map(|(k, s)| BatchSampler::new(s.len(), cfg.batch_per_source, sub_seed(cfg.seed, 100 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = SgdState::default();
    let mut last = f64::NAN;
    for it in 0..cfg.iterations {
        let mut images = Vec::with_capacity(sources.len());
        let mut labels = Vec::new();
        for (k, (s, sampler)) in sources.iter().zip(samplers.iter_mut()).enumerate() {
            let b = sampler.sample(s)?;
            labels.extend(target(k, &b.labels));
            images.push(b.images);
        }
        let x = Tensor::cat_rows(&images.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let xv = g.input("x", x.shape());
        let out = logits(&w, &mut g, &Binding::trainable(PREFIX), xv)?;
        let loss = g.softmax_cross_entropy(out, &labels)?;
        let mut sess = Session::new(&g);
        let diverged = |e: Error| Error::Diverged {
            iteration: it,
            detail: e.to_string(),
        };
        sess.forward(&BTreeMap::from([("x".to_string(), x)]))
            .map_err(diverged)?;
        last = sess.value(loss).map(Tensor::item).unwrap_or(f64::NAN);
        let grads = sess.backward(loss).map_err(diverged)?;
        let grads = w.params().grads_from(&grads, PREFIX);
        let lr = cfg.sgd.lr_at(it, cfg.iterations);
        opt.step(w.params_mut(), &grads, lr, cfg.sgd.momentum, cfg.sgd.weight_decay)?;
    }
    Ok((w, last))
}

/// Trains the task classifier on the pooled sources. The result is both the
/// frozen label predictor of the generator objective and the vanilla
/// baseline.
pub fn pretrain_task_classifier(
    sources: &[DomainDataset],
    val: &[DomainDataset],
    spec: &ClassifierSpec,
    cfg: &PretrainConfig,
) -> Result<Pretrained<TaskClassifierWeights>> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no source domains".into()));
    }
    let init = TaskClassifierWeights::init(spec, sub_seed(cfg.seed, 1))?;
    let (weights, final_loss) = fit(
        init,
        sources,
        cfg,
        |_, y| y.to_vec(),
        |w, g, b, x| Ok(w.forward(g, b, x)?.0),
    )?;
    let val_accuracy = pooled_accuracy(val, |d| evaluate_accuracy(&weights, d))?;
    Ok(Pretrained {
        weights,
        val_accuracy,
        final_loss,
    })
}

/// Trains the critic to tell source domains apart; its embedding then
/// defines every transport cost. Domain labels are source positions.
pub fn pretrain_critic(
    sources: &[DomainDataset],
    val: &[DomainDataset],
    spec: &CriticSpec,
    cfg: &PretrainConfig,
) -> Result<Pretrained<CriticWeights>> {
    if sources.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "critic pretraining needs at least 2 source domains, got {}",
            sources.len()
        )));
    }
    if spec.domains != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "critic head has {} outputs for {} sources",
            spec.domains,
            sources.len()
        )));
    }
    let init = CriticWeights::init(spec, sub_seed(cfg.seed, 2));
    let (weights, final_loss) = fit(
        init,
        sources,
        cfg,
        |k, y| vec![k; y.len()],
        |w, g, b, x| Ok(w.domain_logits(g, b, x)?.0),
    )?;
    let mut hits = 0.0;
    let mut total = 0.0;
    for (k, d) in val.iter().enumerate() {
        let pred = argmax_predictions(d.images(), |g, x| {
            Ok(weights.domain_logits(g, &Binding::frozen(PREFIX), x)?.0)
        })?;
        hits += pred.iter().filter(|&&p| p == k).count() as f64;
        total += pred.len() as f64;
    }
    let val_accuracy = if total > 0.0 { 100.0 * hits / total } else { 0.0 };
    Ok(Pretrained {
        weights,
        val_accuracy,
        final_loss,
    })
}

fn pooled_accuracy(val: &[DomainDataset], acc: impl Fn(&DomainDataset) -> Result<f64>) -> Result<f64> {
    let n: usize = val.iter().map(DomainDataset::len).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for d in val {
        s += acc(d)? * d.len() as f64;
    }
    Ok(s / n as f64)
}
