use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use super::{evaluate_accuracy, mean_std};
use crate::config::ExperimentConfig;
use crate::data::{make_splits, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{CriticWeights, GeneratorWeights, TaskClassifierWeights};
use crate::train::{pretrain_critic, pretrain_task_classifier, run_training, Pretrained, TrainLog};

pub const REPORT_HEADER: &str = "target_domain,method,seed,accuracy,iterations,seconds";
pub const SWEEP_HEADER: &str = "kn,mean_acc,std_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Vanilla,
    L2aOt,
    L2aOtNoDiversity,
    L2aOtNoSemantic,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Vanilla,
        Method::L2aOt,
        Method::L2aOtNoDiversity,
        Method::L2aOtNoSemantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::L2aOt => "l2a_ot",
            Method::L2aOtNoDiversity => "l2a_ot_no_diversity",
            Method::L2aOtNoSemantic => "l2a_ot_no_semantic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// One (target, method, seed) run.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub target: usize,
    pub method: Method,
    pub seed: u64,
    pub k_n: usize,
    /// Percent; `None` when the cell failed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub iterations: usize,
    pub seconds: f64,
    /// Payload reads of the target dataset while training (must be 0).
    pub target_reads: usize,
    /// Fewer than two distinct novel domains, so no diversity pairs.
    pub diversity_degenerate: bool,
    pub log: Option<TrainLog>,
    pub generator: Option<GeneratorWeights>,
    pub classifier: Option<TaskClassifierWeights>,
}

/// Per-target summary over seeds.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub method: Method,
    pub target: usize,
    pub cells: Vec<CellResult>,
    pub mean: f64,
    pub std: f64,
    pub config_digest: String,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn from_cells(method: Method, target: usize, cells: Vec<CellResult>, config_digest: String) -> Self {
        let acc: Vec<f64> = cells.iter().filter_map(|c| c.accuracy).collect();
        let (mean, std) = mean_std(&acc);
        let seconds = cells.iter().map(|c| c.seconds).sum();
        Self {
            method,
            target,
            cells,
            mean,
            std,
            config_digest,
            seconds,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.accuracy).collect()
    }

    pub fn target_reads(&self) -> usize {
        self.cells.iter().map(|c| c.target_reads).sum()
    }

    pub fn csv_rows(&self, out: &mut String) {
        for c in &self.cells {
            let acc = c.accuracy.map_or("NaN".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.target,
                c.method.name(),
                c.seed,
                acc,
                c.iterations,
                c.seconds
            );
        }
    }
}

pub fn reports_csv(reports: &[ExperimentReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        r.csv_rows(&mut s);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kn: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub accuracies: Vec<f64>,
    pub diversity_degenerate: bool,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.kn, r.mean_acc, r.std_acc);
    }
    s
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Trained {
    classifier: TaskClassifierWeights,
    log: Option<TrainLog>,
    generator: Option<GeneratorWeights>,
    degenerate: bool,
}

struct Prepared {
    train: Vec<DomainDataset>,
    val: Vec<DomainDataset>,
    yhat: Pretrained<TaskClassifierWeights>,
    critic: Option<Pretrained<CriticWeights>>,
}

/// Leave-one-domain-out driver. Pretrained label predictors and critics
/// depend only on (target, seed) and are shared across methods and sweeps.
pub struct Experiment<'a> {
    domains: &'a [DomainDataset],
    cfg: ExperimentConfig,
    splits: BTreeMap<usize, (DomainDataset, DomainDataset)>,
    prepared: BTreeMap<(usize, u64), Prepared>,
}

impl<'a> Experiment<'a> {
    pub fn new(domains: &'a [DomainDataset], cfg: &ExperimentConfig) -> Result<Self> {
        if domains.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 domains, got {}",
                domains.len()
            )));
        }
        Ok(Self {
            domains,
            cfg: cfg.clone(),
            splits: BTreeMap::new(),
            prepared: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn split(&mut self, d: usize) -> Result<(DomainDataset, DomainDataset)> {
        if let Some(s) = self.splits.get(&d) {
            return Ok(s.clone());
        }
        let s = make_splits(&self.domains[d], &self.cfg.domains.split)?;
        self.splits.insert(d, s.clone());
        Ok(s)
    }

    /// Train/val splits of every domain except `target`, renumbered as
    /// sources `0..K_s`.
    pub fn source_splits(&mut self, target: usize) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for d in (0..self.domains.len()).filter(|&d| d != target) {
            let (t, v) = self.split(d)?;
            train.push(t);
            val.push(v);
        }
        Ok((train, val))
    }

    fn prepare(&mut self, target: usize, seed: u64, critic: bool) -> Result<&Prepared> {
        if !self.prepared.contains_key(&(target, seed)) {
            let (train, val) = self.source_splits(target)?;
            let mut pc = self.cfg.pretrain;
            pc.seed = seed;
            let yhat = pretrain_task_classifier(&train, &val, &self.cfg.classifier_spec(), &pc)?;
            self.prepared.insert(
                (target, seed),
                Prepared {
                    train,
                    val,
                    yhat,
                    critic: None,
                },
            );
        }
        let p = self.prepared.get_mut(&(target, seed)).expect("inserted");
        if critic && p.critic.is_none() {
            let mut cc = self.cfg.critic;
            cc.seed = seed;
            let spec = self.cfg.critic_spec(p.train.len());
            p.critic = Some(pretrain_critic(&p.train, &p.val, &spec, &cc)?);
        }
        Ok(p)
    }

    /// Source-val accuracy of the label predictor and critic of a cell.
    pub fn pretrained(
        &mut self,
        target: usize,
        seed: u64,
    ) -> Result<(Pretrained<TaskClassifierWeights>, Pretrained<CriticWeights>)> {
        let p = self.prepare(target, seed, true)?;
        Ok((p.yhat.clone(), p.critic.clone().expect("critic prepared")))
    }

    pub fn source_val(&mut self, target: usize) -> Result<Vec<DomainDataset>> {
        Ok(self.source_splits(target)?.1)
    }

    fn train_cell(&mut self, method: Method, target: usize, seed: u64, k_n: usize) -> Result<Trained> {
        let mut tc = self.cfg.train.clone();
        tc.seed = seed;
        tc.k_n = k_n;
        match method {
            Method::Vanilla => {
                let p = self.prepare(target, seed, false)?;
                return Ok(Trained {
                    classifier: p.yhat.weights.clone(),
                    log: None,
                    generator: None,
                    degenerate: false,
                });
            }
            Method::L2aOt => {}
            Method::L2aOtNoDiversity => tc.diversity = false,
            Method::L2aOtNoSemantic => {
                tc.weights.lambda_cycle = 0.0;
                tc.weights.lambda_ce = 0.0;
            }
        }
        if let Some(dir) = &tc.checkpoint_dir {
            tc.checkpoint_dir = Some(dir.join(format!("t{target}_{}_s{seed}_kn{k_n}", method.name())));
        }
        let p = self.prepare(target, seed, true)?;
        let critic = &p.critic.as_ref().expect("critic prepared").weights;
        let out = run_training(&p.train, &p.yhat.weights, critic, &tc)?;
        Ok(Trained {
            classifier: out.classifier,
            log: Some(out.log),
            generator: Some(out.generator),
            degenerate: out.diversity_degenerate,
        })
    }

    /// Trains one cell and scores it on the held-out domain. Training
    /// errors are recorded in the cell rather than returned.
    pub fn run_cell(&mut self, method: Method, target: usize, seed: u64, k_n: Option<usize>) -> Result<CellResult> {
        if target >= self.domains.len() {
            return Err(Error::InvalidArgument(format!("target {target} out of range")));
        }
        let k_s = self.domains.len() - 1;
        let k_n = k_n.unwrap_or_else(|| self.cfg.train.novel_domains(k_s));
        let started = Instant::now();
        let before = self.domains[target].access_count();
        let trained = self.train_cell(method, target, seed, k_n);
        let target_reads = self.domains[target].access_count() - before;
        let iterations = if method == Method::Vanilla {
            self.cfg.pretrain.iterations
        } else {
            self.cfg.train.iterations
        };
        let mut cell = CellResult {
            target,
            method,
            seed,
            k_n,
            accuracy: None,
            error: None,
            iterations,
            seconds: 0.0,
            target_reads,
            diversity_degenerate: false,
            log: None,
            generator: None,
            classifier: None,
        };
        match trained {
            Ok(t) => {
                cell.accuracy = Some(evaluate_accuracy(&t.classifier, &self.domains[target])?);
                cell.diversity_degenerate = t.degenerate;
                cell.log = t.log;
                cell.generator = t.generator;
                cell.classifier = Some(t.classifier);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        if self.cfg.train.wall_time {
            cell.seconds = started.elapsed().as_secs_f64();
        }
        Ok(cell)
    }

    /// One report per target for `method`, over all configured seeds.
    pub fn lodo(&mut self, method: Method, targets: &[usize]) -> Result<Vec<ExperimentReport>> {
        let seeds = self.cfg.seeds.clone();
        let digest = self.cfg.digest();
        targets
            .iter()
            .map(|&t| {
                let cells = seeds
                    .iter()
                    .map(|&s| self.run_cell(method, t, s, None))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ExperimentReport::from_cells(method, t, cells, digest.clone()))
            })
            .collect()
    }

    /// Full method at each `K_n`, pooled over targets and seeds.
    pub fn kn_sweep(&mut self, kn_values: &[usize], targets: &[usize]) -> Result<Vec<SweepRow>> {
        let k_s = self.domains.len() - 1;
        if let Some(&k) = kn_values.iter().find(|&&k| k == 0 || k > 2 * k_s) {
            return Err(Error::InvalidArgument(format!("K_n = {k} outside [1, {}]", 2 * k_s)));
        }
        let seeds = self.cfg.seeds.clone();
        kn_values
            .iter()
            .map(|&kn| {
                let mut acc = Vec::new();
                let mut degenerate = false;
                for &t in targets {
                    for &s in &seeds {
                        let c = self.run_cell(Method::L2aOt, t, s, Some(kn))?;
                        degenerate |= c.diversity_degenerate;
                        acc.extend(c.accuracy);
                    }
                }
                let (mean_acc, std_acc) = mean_std(&acc);
                Ok(SweepRow {
                    kn,
                    mean_acc,
                    std_acc,
                    accuracies: acc,
                    diversity_degenerate: degenerate,
                })
            })
            .collect()
    }
}

/// Runs `method` for every configured target and seed.
pub fn leave_one_domain_out(
    domains: &[DomainDataset],
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<Vec<ExperimentReport>> {
    let targets = cfg.targets.clone();
    Experiment::new(domains, cfg)?.lodo(method, &targets)
}

/// `K_n` sweep over the configured targets and seeds.
pub fn kn_sweep(domains: &[DomainDataset], cfg: &ExperimentConfig, kn_values: &[usize]) -> Result<Vec<SweepRow>> {
    let targets = cfg.targets.clone();
    Experiment::new(domains, cfg)?.kn_sweep(kn_values, &targets)
}
