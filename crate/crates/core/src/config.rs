//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys live under the
//! `domains.`, `model.`, `ot.`, `train.` and `eval.` prefixes; per-domain
//! keys are `domains.<i>.<field>`. `method` is shorthand for `eval.method`.
//! Every key may be overridden after parsing with [`ConfigMap::set`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{
    apply_domain_transform, generate_glyph_dataset, idx, Background, DomainDataset, DomainTransform, GlyphSpec,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::Method;
use crate::nets::{ClassifierSpec, CriticSpec};
use crate::ot::{EpsilonScale, SinkhornSettings};
use crate::train::{AdamConfig, LossWeights, PretrainConfig, SgdConfig, TrainConfig};

/// Raw key/value pairs, in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ConfigMap::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            m.set(k.trim(), v.trim())?;
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = if key == "method" { "eval.method" } else { key };
        if key.is_empty()
            || !["domains.", "model.", "ot.", "train.", "eval."]
                .iter()
                .any(|p| key.starts_with(p))
        {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DomainSource {
    Glyph(DomainTransform),
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainsConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub glyph_seed: u64,
    pub domains: Vec<DomainSource>,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classifier_width: usize,
    pub critic_widths: [usize; 3],
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub domains: DomainsConfig,
    pub model: ModelConfig,
    /// Label predictor / vanilla baseline schedule.
    pub pretrain: PretrainConfig,
    pub critic: PretrainConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub targets: Vec<usize>,
    /// Empty means `{1, K_s, 2·K_s}`.
    pub kn_values: Vec<usize>,
    pub out_dir: PathBuf,
    pub embedding_samples: usize,
}

/// Style of the built-in four-domain benchmark.
pub fn default_transform(i: usize) -> DomainTransform {
    let base = DomainTransform {
        seed: 17 + i as u64,
        ..DomainTransform::default()
    };
    match i {
        0 => DomainTransform {
            gain: [0.9, 0.9, 0.9],
            ..base
        },
        1 => DomainTransform {
            gain: [1.0, 0.45, 0.3],
            bias: [0.0, -0.3, -0.4],
            background: Background::LinearGradient,
            amplitude: 0.5,
            seed: 30,
            ..base
        },
        2 => DomainTransform {
            gain: [0.35, 1.0, 0.5],
            bias: [-0.3, 0.0, -0.2],
            background: Background::Checker,
            amplitude: 0.35,
            gamma: 0.6,
            ..base
        },
        _ => DomainTransform {
            gain: [0.6, 0.6, 1.0],
            bias: [0.2, 0.2, 0.1],
            background: Background::GaussianNoise,
            amplitude: 0.3,
            gamma: 1.6,
            ..base
        },
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let l: Vec<T> = list(key, v)?;
    l.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly three values")))
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn take_with<T>(&mut self, key: &str, default: T, f: impl Fn(&str, &str) -> Result<T>) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => f(key, &v),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_map(&ConfigMap::default()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn from_map(m: &ConfigMap) -> Result<Self> {
        let mut r = Reader { map: m.0.clone() };
        let count: usize = r.take("domains.count", 4)?;
        let kind: String = r.take("domains.kind", "glyph".to_string())?;
        let mut domains = Vec::with_capacity(count);
        for i in 0..count {
            let key = |f: &str| format!("domains.{i}.{f}");
            let src = match kind.as_str() {
                "glyph" => {
                    let d = default_transform(i);
                    DomainSource::Glyph(DomainTransform {
                        gain: r.take_with(&key("gain"), d.gain, triple)?,
                        bias: r.take_with(&key("bias"), d.bias, triple)?,
                        background: r.take_with(&key("background"), d.background, |_, v| Background::parse(v))?,
                        amplitude: r.take(&key("amplitude"), d.amplitude)?,
                        gamma: r.take(&key("gamma"), d.gamma)?,
                        invert: r.take(&key("invert"), d.invert)?,
                        seed: r.take(&key("seed"), d.seed)?,
                    })
                }
                "idx" => {
                    let images: String = r.take(&key("idx_images"), String::new())?;
                    let labels: String = r.take(&key("idx_labels"), String::new())?;
                    if images.is_empty() || labels.is_empty() {
                        return Err(Error::Config(format!(
                            "domain {i}: idx_images and idx_labels are required"
                        )));
                    }
                    DomainSource::Idx {
                        images: images.into(),
                        labels: labels.into(),
                    }
                }
                other => return Err(Error::Config(format!("unknown domains.kind `{other}`"))),
            };
            domains.push(src);
        }
        let domains = DomainsConfig {
            n_per_class: r.take("domains.n_per_class", 50)?,
            image_size: r.take("domains.image_size", 32)?,
            glyph_seed: r.take("domains.glyph_seed", 0)?,
            domains,
            split: SplitSpec {
                train: r.take("domains.split_train", 0.8)?,
                val: r.take("domains.split_val", 0.2)?,
                seed: r.take("domains.split_seed", 0)?,
            },
        };
        let model = ModelConfig {
            classifier_width: r.take("model.classifier_width", 32)?,
            critic_widths: r.take_with("model.critic_widths", [16, 32, 64], triple)?,
            embed_dim: r.take("model.embed_dim", 64)?,
        };
        let generator_widths = r.take_with("model.generator_widths", [16, 32, 64], triple)?;
        let d_sink = SinkhornSettings::default();
        let sinkhorn = SinkhornSettings {
            epsilon: r.take("ot.epsilon", d_sink.epsilon)?,
            scale: r.take_with("ot.scale", d_sink.scale, |k, v| match v {
                "mean" => Ok(EpsilonScale::MeanCost),
                "absolute" => Ok(EpsilonScale::Absolute),
                _ => Err(Error::Config(format!("`{k}` must be mean or absolute"))),
            })?,
            max_iterations: r.take("ot.iterations", d_sink.max_iterations)?,
            tolerance: r.take("ot.tolerance", d_sink.tolerance)?,
        };
        let da = AdamConfig::default();
        let ds = SgdConfig::default();
        let dw = LossWeights::default();
        let sgd = SgdConfig {
            lr: r.take("train.sgd_lr", ds.lr)?,
            momentum: r.take("train.sgd_momentum", ds.momentum)?,
            weight_decay: r.take("train.sgd_weight_decay", ds.weight_decay)?,
            decay_at: r.take("train.sgd_decay_at", ds.decay_at)?,
            decay_factor: r.take("train.sgd_decay_factor", ds.decay_factor)?,
        };
        let iterations = r.take("train.iterations", 3000)?;
        let batch = r.take("train.batch_per_source", 8)?;
        let train = TrainConfig {
            k_n: r.take("train.k_n", 0)?,
            iterations,
            batch_per_source: batch,
            generator_widths,
            adam: AdamConfig {
                lr: r.take("train.adam_lr", da.lr)?,
                beta1: r.take("train.adam_beta1", da.beta1)?,
                beta2: r.take("train.adam_beta2", da.beta2)?,
                eps: r.take("train.adam_eps", da.eps)?,
            },
            sgd,
            weights: LossWeights {
                lambda_domain: r.take("train.lambda_domain", dw.lambda_domain)?,
                lambda_cycle: r.take("train.lambda_cycle", dw.lambda_cycle)?,
                lambda_ce: r.take("train.lambda_ce", dw.lambda_ce)?,
                alpha: r.take("train.alpha", dw.alpha)?,
            },
            diversity: r.take("train.diversity", true)?,
            sinkhorn,
            seed: 0,
            checkpoint_every: r.take("train.checkpoint_every", 0)?,
            checkpoint_dir: None,
            wall_time: r.take("train.wall_time", false)?,
        };
        let pretrain = PretrainConfig {
            iterations: r.take("train.pretrain_iterations", iterations)?,
            batch_per_source: batch,
            sgd,
            seed: 0,
        };
        let critic = PretrainConfig {
            iterations: r.take("train.critic_iterations", 1000)?,
            batch_per_source: batch,
            sgd,
            seed: 0,
        };
        let cfg = ExperimentConfig {
            domains,
            model,
            pretrain,
            critic,
            train,
            method: r.take_with("eval.method", Method::L2aOt, |_, v| Method::parse(v))?,
            seeds: r.take_with("eval.seeds", vec![0, 1, 2], list)?,
            targets: r.take_with("eval.targets", vec![count.saturating_sub(1)], list)?,
            kn_values: r.take_with("eval.kn_values", Vec::new(), list)?,
            out_dir: r.take("eval.out_dir", "out".to_string())?.into(),
            embedding_samples: r.take("eval.embedding_samples", 50)?,
        };
        if let Some(k) = r.map.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut m = ConfigMap::load(path)?;
        for o in overrides {
            m.set_pair(o)?;
        }
        Self::from_map(&m)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domains;
        if d.domains.len() < 3 {
            return Err(Error::Config("need at least 3 domains (2 sources and a target)".into()));
        }
        if d.image_size == 0 || !d.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 16",
                d.image_size
            )));
        }
        d.split.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= d.domains.len()) {
            return Err(Error::Config(format!("target {t} out of range")));
        }
        let k_s = d.domains.len() - 1;
        if let Some(&k) = self.kn_values.iter().find(|&&k| k == 0 || k > 2 * k_s) {
            return Err(Error::Config(format!("K_n = {k} outside [1, {}]", 2 * k_s)));
        }
        Ok(())
    }

    pub fn num_sources(&self) -> usize {
        self.domains.domains.len() - 1
    }

    pub fn kn_values(&self) -> Vec<usize> {
        if self.kn_values.is_empty() {
            let k = self.num_sources();
            vec![1, k, 2 * k]
        } else {
            self.kn_values.clone()
        }
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            image_channels: 3,
            image_size: self.domains.image_size,
            width: self.model.classifier_width,
            classes: crate::data::NUM_CLASSES,
        }
    }

    pub fn critic_spec(&self, sources: usize) -> CriticSpec {
        CriticSpec {
            image_channels: 3,
            widths: self.model.critic_widths,
            embed_dim: self.model.embed_dim,
            domains: sources,
        }
    }

    /// Canonical rendering of every resolved key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.domains;
        let _ = writeln!(s, "domains.count = {}", d.domains.len());
        let kind = match d.domains.first() {
            Some(DomainSource::Idx { .. }) => "idx",
            _ => "glyph",
        };
        let _ = writeln!(s, "domains.kind = {kind}");
        for (i, src) in d.domains.iter().enumerate() {
            match src {
                DomainSource::Glyph(t) => {
                    let _ = writeln!(s, "domains.{i}.gain = {}", fmt_list(&t.gain));
                    let _ = writeln!(s, "domains.{i}.bias = {}", fmt_list(&t.bias));
                    let _ = writeln!(s, "domains.{i}.background = {}", t.background.name());
                    let _ = writeln!(s, "domains.{i}.amplitude = {}", t.amplitude);
                    let _ = writeln!(s, "domains.{i}.gamma = {}", t.gamma);
                    let _ = writeln!(s, "domains.{i}.invert = {}", t.invert);
                    let _ = writeln!(s, "domains.{i}.seed = {}", t.seed);
                }
                DomainSource::Idx { images, labels } => {
                    let _ = writeln!(s, "domains.{i}.idx_images = {}", images.display());
                    let _ = writeln!(s, "domains.{i}.idx_labels = {}", labels.display());
                }
            }
        }
        let _ = writeln!(s, "domains.n_per_class = {}", d.n_per_class);
        let _ = writeln!(s, "domains.image_size = {}", d.image_size);
        let _ = writeln!(s, "domains.glyph_seed = {}", d.glyph_seed);
        let _ = writeln!(s, "domains.split_train = {}", d.split.train);
        let _ = writeln!(s, "domains.split_val = {}", d.split.val);
        let _ = writeln!(s, "domains.split_seed = {}", d.split.seed);
        let m = &self.model;
        let _ = writeln!(s, "model.classifier_width = {}", m.classifier_width);
        let _ = writeln!(s, "model.critic_widths = {}", fmt_list(&m.critic_widths));
        let _ = writeln!(s, "model.embed_dim = {}", m.embed_dim);
        let t = &self.train;
        let _ = writeln!(s, "model.generator_widths = {}", fmt_list(&t.generator_widths));
        let _ = writeln!(s, "ot.epsilon = {}", t.sinkhorn.epsilon);
        let scale = match t.sinkhorn.scale {
            EpsilonScale::MeanCost => "mean",
            EpsilonScale::Absolute => "absolute",
        };
        let _ = writeln!(s, "ot.scale = {scale}");
        let _ = writeln!(s, "ot.iterations = {}", t.sinkhorn.max_iterations);
        let _ = writeln!(s, "ot.tolerance = {}", t.sinkhorn.tolerance);
        let _ = writeln!(s, "train.iterations = {}", t.iterations);
        let _ = writeln!(s, "train.batch_per_source = {}", t.batch_per_source);
        let _ = writeln!(s, "train.k_n = {}", t.k_n);
        let _ = writeln!(s, "train.lambda_domain = {}", t.weights.lambda_domain);
        let _ = writeln!(s, "train.lambda_cycle = {}", t.weights.lambda_cycle);
        let _ = writeln!(s, "train.lambda_ce = {}", t.weights.lambda_ce);
        let _ = writeln!(s, "train.alpha = {}", t.weights.alpha);
        let _ = writeln!(s, "train.diversity = {}", t.diversity);
        let _ = writeln!(s, "train.adam_lr = {}", t.adam.lr);
        let _ = writeln!(s, "train.adam_beta1 = {}", t.adam.beta1);
        let _ = writeln!(s, "train.adam_beta2 = {}", t.adam.beta2);
        let _ = writeln!(s, "train.adam_eps = {}", t.adam.eps);
        let _ = writeln!(s, "train.sgd_lr = {}", t.sgd.lr);
        let _ = writeln!(s, "train.sgd_momentum = {}", t.sgd.momentum);
        let _ = writeln!(s, "train.sgd_weight_decay = {}", t.sgd.weight_decay);
        let _ = writeln!(s, "train.sgd_decay_at = {}", t.sgd.decay_at);
        let _ = writeln!(s, "train.sgd_decay_factor = {}", t.sgd.decay_factor);
        let _ = writeln!(s, "train.pretrain_iterations = {}", self.pretrain.iterations);
        let _ = writeln!(s, "train.critic_iterations = {}", self.critic.iterations);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "train.wall_time = {}", t.wall_time);
        let _ = writeln!(s, "eval.method = {}", self.method.name());
        let _ = writeln!(s, "eval.seeds = {}", fmt_list(&self.seeds));
        let _ = writeln!(s, "eval.targets = {}", fmt_list(&self.targets));
        let _ = writeln!(s, "eval.kn_values = {}", fmt_list(&self.kn_values));
        let _ = writeln!(s, "eval.out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "eval.embedding_samples = {}", self.embedding_samples);
        s
    }

    /// SHA-256 of [`Self::to_text`], first 16 hex digits.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_text().as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Builds every domain, in index order.
    pub fn build_domains(&self) -> Result<Vec<DomainDataset>> {
        let d = &self.domains;
        let mut base = None;
        d.domains
            .iter()
            .enumerate()
            .map(|(i, src)| match src {
                DomainSource::Glyph(t) => {
                    if base.is_none() {
                        base = Some(generate_glyph_dataset(&GlyphSpec {
                            n_per_class: d.n_per_class,
                            image_size: d.image_size,
                            seed: d.glyph_seed,
                        })?);
                    }
                    apply_domain_transform(base.as_ref().expect("built"), t, i)
                }
                DomainSource::Idx { images, labels } => idx::load_idx_domain(images, labels, d.image_size, i),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m =
            ConfigMap::parse("train.iterations = 12 # short\nmethod = vanilla\n\ndomains.1.invert = true").unwrap();
        m.set_pair("eval.seeds=4,5").unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.pretrain.iterations, 12);
        assert_eq!(c.method, Method::Vanilla);
        assert_eq!(c.seeds, vec![4, 5]);
        let back = ExperimentConfig::from_map(&ConfigMap::parse(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ConfigMap::parse("bogus = 1").is_err());
        assert!(ConfigMap::parse("train.iterations").is_err());
        let m = ConfigMap::parse("train.nope = 1").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
        let m = ConfigMap::parse("train.iterations = x").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
        let m = ConfigMap::parse("eval.kn_values = 7").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
    }

    #[test]
    fn default_domains_are_distinct() {
        let mut c = ExperimentConfig::default();
        c.domains.n_per_class = 20;
        c.domains.image_size = 16;
        let doms = c.build_domains().unwrap();
        let means: Vec<[f64; 3]> = doms.iter().map(DomainDataset::channel_means).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let gap: f64 = (0..3).map(|c| (means[i][c] - means[j][c]).abs()).sum();
                assert!(gap > 0.05, "domains {i}/{j}: {gap}");
            }
        }
    }
}
