use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{
    generator_loss, loss_ce_generated, loss_cycle, loss_diversity, loss_novel, task_loss, GeneratorTerms,
};
use super::{assign_novel_domains, sub_seed, AdamState, NovelAssignment, SgdState, TrainConfig};
use crate::data::{BatchSampler, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{
    Binding, CriticWeights, DomainCode, GeneratorSpec, GeneratorWeights, TaskClassifierWeights, Weights,
};
use crate::tensor::{Graph, Session, Tensor, Var};

pub const LOG_HEADER: &str =
    "iter,l_novel,l_diversity,l_cycle,l_ce_gen,l_g,l_f_real,l_f_gen,grad_norm_g,grad_norm_f,seconds";

/// One iteration of the alternating loop. Terms that carry zero weight are
/// not evaluated and read as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub l_novel: f64,
    pub l_diversity: f64,
    pub l_cycle: f64,
    pub l_ce_gen: f64,
    pub l_g: f64,
    pub l_f_real: f64,
    pub l_f_gen: f64,
    pub grad_norm_g: f64,
    pub grad_norm_f: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.l_novel,
                r.l_diversity,
                r.l_cycle,
                r.l_ce_gen,
                r.l_g,
                r.l_f_real,
                r.l_f_gen,
                r.grad_norm_g,
                r.grad_norm_f,
                r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean of a column over records `[from, to)`.
    pub fn window_mean(&self, from: usize, to: usize, col: impl Fn(&IterRecord) -> f64) -> f64 {
        let rows = &self.records[from.min(self.len())..to.min(self.len())];
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().map(col).sum::<f64>() / rows.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorWeights,
    pub classifier: TaskClassifierWeights,
    pub log: TrainLog,
    /// Some iteration had no pair of distinct novel labels.
    pub diversity_degenerate: bool,
}

/// Everything carried from one iteration to the next.
pub struct TrainState<'a> {
    sources: &'a [DomainDataset],
    yhat: &'a TaskClassifierWeights,
    phi: &'a CriticWeights,
    cfg: TrainConfig,
    k_n: usize,
    pub iter: usize,
    pub generator: GeneratorWeights,
    pub classifier: TaskClassifierWeights,
    adam: AdamState,
    sgd: SgdState,
    samplers: Vec<BatchSampler>,
    rng: ChaCha8Rng,
    started: Instant,
    pub log: TrainLog,
    pub diversity_degenerate: bool,
}

const G: &str = "g.";
const F: &str = "f.";

impl<'a> TrainState<'a> {
    /// `F` starts from the same initialization and sees the same real
    /// batches as the vanilla baseline trained with the same seed.
    pub fn new(
        sources: &'a [DomainDataset],
        yhat: &'a TaskClassifierWeights,
        phi: &'a CriticWeights,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if sources.is_empty() {
            return Err(Error::InvalidArgument("no source domains".into()));
        }
        let k_s = sources.len();
        let k_n = cfg.novel_domains(k_s);
        let spec = GeneratorSpec {
            image_channels: 3,
            num_domains: k_s + k_n,
            widths: cfg.generator_widths,
        };
        let samplers = sources
            .iter()
            .enumerate()
            .map(|(k, s)| BatchSampler::new(s.len(), cfg.batch_per_source, sub_seed(cfg.seed, 100 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sources,
            yhat,
            phi,
            k_n,
            iter: 0,
            generator: GeneratorWeights::init(&spec, sub_seed(cfg.seed, 3)),
            classifier: TaskClassifierWeights::init(yhat.spec(), sub_seed(cfg.seed, 1))?,
            adam: AdamState::default(),
            sgd: SgdState::default(),
            samplers,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4)),
            started: Instant::now(),
            log: TrainLog::default(),
            diversity_degenerate: false,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn codes(&self, rows: usize, index: impl Fn(usize) -> usize) -> Result<Vec<DomainCode>> {
        let len = self.sources.len() + self.k_n;
        (0..rows).map(|r| DomainCode::new(index(r), len)).collect()
    }

    /// Sample, translate once, update `G`, then update `F` on the same
    /// (detached) translations.
    pub fn step(&mut self) -> Result<IterRecord> {
        let it = self.iter;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iteration: it,
                detail: e.to_string(),
            },
            other => other,
        };
        let k_s = self.sources.len();
        let b = self.cfg.batch_per_source;
        let mut images = Vec::with_capacity(k_s);
        let mut labels = Vec::with_capacity(k_s * b);
        for (s, sampler) in self.sources.iter().zip(self.samplers.iter_mut()) {
            let batch = sampler.sample(s)?;
            labels.extend_from_slice(&batch.labels);
            images.push(batch.images);
        }
        let real = Tensor::cat_rows(&images.iter().collect::<Vec<_>>())?;
        let NovelAssignment(novel) = assign_novel_domains(k_s, self.k_n, &mut self.rng)?;
        let novel_codes = self.codes(k_s * b, |r| k_s + novel[r / b])?;
        let source_codes = self.codes(k_s * b, |r| r / b)?;
        let w = self.cfg.weights;
        let s = self.cfg.sinkhorn.clone();

        // generator step
        let mut g = Graph::new();
        let x = g.input("x", real.shape());
        let gbind = Binding::trainable(G);
        let gen = self.generator.forward(&mut g, &gbind, x, &novel_codes)?;
        let mut terms = GeneratorTerms::default();
        let per_source = |g: &mut Graph, v: Var| -> Result<Vec<Var>> {
            (0..k_s).map(|k| g.slice_rows(v, k * b, (k + 1) * b)).collect()
        };
        let mut degenerate = false;
        if w.lambda_domain > 0.0 {
            let pb = Binding::frozen("phi.");
            let fg = self.phi.embed(&mut g, &pb, gen)?;
            let fr = self.phi.embed(&mut g, &pb, x)?;
            let gen_feats = per_source(&mut g, fg)?;
            let real_feats = per_source(&mut g, fr)?;
            terms.novel = Some(loss_novel(&mut g, &gen_feats, &real_feats, &s)?);
            if self.cfg.diversity {
                let d = loss_diversity(&mut g, &gen_feats, &novel, &s)?;
                degenerate = d.degenerate();
                terms.diversity = d.value;
            }
        }
        if w.lambda_cycle > 0.0 {
            terms.cycle = Some(loss_cycle(&mut g, &self.generator, &gbind, gen, x, &source_codes)?);
        }
        if w.lambda_ce > 0.0 {
            terms.ce = Some(loss_ce_generated(&mut g, self.yhat, gen, &labels)?);
        }
        let l_g = generator_loss(&mut g, &terms, &w)?;
        let mut sess = Session::new(&g);
        sess.forward(&BTreeMap::from([("x".to_string(), real.clone())]))
            .map_err(diverged)?;
        let value = |v: Option<Var>| v.and_then(|v| sess.value(v)).map(Tensor::item).unwrap_or(0.0);
        let (l_novel, l_diversity, l_cycle, l_ce_gen, l_g_value) = (
            value(terms.novel),
            value(terms.diversity),
            value(terms.cycle),
            value(terms.ce),
            value(Some(l_g)),
        );
        let generated = sess
            .value(gen)
            .cloned()
            .ok_or_else(|| Error::Malformed("generator output missing".into()))?;
        let grads = sess.backward(l_g).map_err(diverged)?;
        drop(sess);
        let g_grads = self.generator.params().grads_from(&grads, G);
        let grad_norm_g = g_grads.l2_norm();
        self.adam.step(self.generator.params_mut(), &g_grads, &self.cfg.adam)?;

        // classifier step
        let mut g = Graph::new();
        let xr = g.input("real", real.shape());
        let xg = g.input("generated", generated.shape());
        let fbind = Binding::trainable(F);
        let t = task_loss(&mut g, &self.classifier, &fbind, xr, xg, &labels, w.alpha)?;
        let mut sess = Session::new(&g);
        sess.forward(&BTreeMap::from([
            ("real".to_string(), real),
            ("generated".to_string(), generated),
        ]))
        .map_err(diverged)?;
        let value = |v: Option<Var>| v.and_then(|v| sess.value(v)).map(Tensor::item).unwrap_or(0.0);
        let (l_f_real, l_f_gen) = (value(t.real), value(t.generated));
        let grads = sess.backward(t.total).map_err(diverged)?;
        drop(sess);
        let f_grads = self.classifier.params().grads_from(&grads, F);
        let grad_norm_f = f_grads.l2_norm();
        let lr = self.cfg.sgd.lr_at(it, self.cfg.iterations);
        self.sgd.step(
            self.classifier.params_mut(),
            &f_grads,
            lr,
            self.cfg.sgd.momentum,
            self.cfg.sgd.weight_decay,
        )?;

        let rec = IterRecord {
            iter: it,
            l_novel,
            l_diversity,
            l_cycle,
            l_ce_gen,
            l_g: l_g_value,
            l_f_real,
            l_f_gen,
            grad_norm_g,
            grad_norm_f,
            seconds: if self.cfg.wall_time {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        let finite = [
            l_novel,
            l_diversity,
            l_cycle,
            l_ce_gen,
            l_g_value,
            l_f_real,
            l_f_gen,
            grad_norm_g,
            grad_norm_f,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("non-finite loss record {rec:?}"),
            });
        }
        self.diversity_degenerate |= degenerate;
        self.iter += 1;
        self.log.records.push(rec.clone());
        if self.cfg.checkpoint_every > 0 && self.iter.is_multiple_of(self.cfg.checkpoint_every) {
            self.checkpoint()?;
        }
        Ok(rec)
    }

    /// Writes `generator_<iter>.l2aw` and `classifier_<iter>.l2aw`.
    pub fn checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.generator
                .save(dir.join(format!("generator_{:06}.l2aw", self.iter)))?;
            self.classifier
                .save(dir.join(format!("classifier_{:06}.l2aw", self.iter)))?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            generator: self.generator,
            classifier: self.classifier,
            log: self.log,
            diversity_degenerate: self.diversity_degenerate,
        }
    }
}

/// Runs `cfg.iterations` alternating updates. On divergence the error is
/// returned and checkpoints already on disk are left in place.
pub fn run_training(
    sources: &[DomainDataset],
    yhat: &TaskClassifierWeights,
    phi: &CriticWeights,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(sources, yhat, phi, cfg)?;
    while state.iter < cfg.iterations {
        state.step()?;
    }
    Ok(state.finish())
}
