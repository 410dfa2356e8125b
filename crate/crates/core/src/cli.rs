//! Command-line surface of the `l2a` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigMap, ExperimentConfig};
use crate::data::DomainDataset;
use crate::diagnostics::{gradient_suite, selftest, CheckResult};
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, export_embeddings, reports_csv, sweep_csv, Experiment};
use crate::nets::{CriticWeights, GeneratorWeights, TaskClassifierWeights, Weights};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "l2a", version, about = "Novel-domain augmentation by optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render every domain and cache it under `<out_dir>/data`.
    MakeData(Common),
    /// Fit the label predictor and domain critic for the first target and seed.
    Pretrain(Common),
    /// Train one cell and save weights plus the iteration log.
    Train(Common),
    /// Score saved classifier weights on every domain.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Classifier weights; defaults to `<out_dir>/classifier.l2aw`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Leave-one-domain-out report for `eval.method`.
    Lodo(Common),
    /// Accuracy as a function of the number of novel domains.
    KnSweep(Common),
    /// PCA of critic features for source, generated and target samples.
    ExportEmbeddings(Common),
    /// Finite-difference check of every graph op and composed loss.
    Gradcheck(Common),
    /// Quick invariant suite.
    Selftest(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.set),
            None => {
                let mut m = ConfigMap::default();
                for s in &self.set {
                    m.set_pair(s)?;
                }
                ExperimentConfig::from_map(&m)
            }
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn first<T: Copy>(v: &[T], what: &str) -> Result<T> {
    v.first()
        .copied()
        .ok_or_else(|| Error::Config(format!("no {what} configured")))
}

fn report(results: &[CheckResult]) -> bool {
    for r in results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    failed == 0
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::MakeData(c) => make_data(&c.load()?),
        Command::Pretrain(c) => pretrain(&c.load()?),
        Command::Train(c) => train(&c.load()?),
        Command::Eval { common, weights } => eval(&common.load()?, weights),
        Command::Lodo(c) => lodo(&c.load()?),
        Command::KnSweep(c) => kn_sweep(&c.load()?),
        Command::ExportEmbeddings(c) => embeddings(&c.load()?),
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            Ok(report(&gradient_suite(first(&cfg.seeds, "seed")?)?))
        }
        Command::Selftest(c) => {
            let cfg = c.load()?;
            Ok(report(&selftest(first(&cfg.seeds, "seed")?)?))
        }
    }
}

fn make_data(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = cfg.out_dir.join("data");
    ensure_dir(&dir)?;
    for ds in cfg.build_domains()? {
        let path = dir.join(format!("domain{}.l2aw", ds.domain()));
        ds.save(&path)?;
        println!("domain {} {} samples {}", ds.domain(), ds.len(), ds.digest());
    }
    Ok(true)
}

fn pretrain(cfg: &ExperimentConfig) -> Result<bool> {
    let domains = cfg.build_domains()?;
    let target = first(&cfg.targets, "target")?;
    let seed = first(&cfg.seeds, "seed")?;
    let mut exp = Experiment::new(&domains, cfg)?;
    let (yhat, critic) = exp.pretrained(target, seed)?;
    ensure_dir(&cfg.out_dir)?;
    yhat.weights.save(cfg.out_dir.join("yhat.l2aw"))?;
    critic.weights.save(cfg.out_dir.join("critic.l2aw"))?;
    println!("label predictor source-val accuracy {:.2}", yhat.val_accuracy);
    println!("critic source-val accuracy {:.2}", critic.val_accuracy);
    Ok(true)
}

fn train(cfg: &ExperimentConfig) -> Result<bool> {
    let domains = cfg.build_domains()?;
    let target = first(&cfg.targets, "target")?;
    let seed = first(&cfg.seeds, "seed")?;
    let mut exp = Experiment::new(&domains, cfg)?;
    let (yhat, critic) = exp.pretrained(target, seed)?;
    let cell = exp.run_cell(cfg.method, target, seed, None)?;
    if let Some(e) = &cell.error {
        return Err(Error::InvalidArgument(format!("training failed: {e}")));
    }
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    yhat.weights.save(dir.join("yhat.l2aw"))?;
    critic.weights.save(dir.join("critic.l2aw"))?;
    if let Some(f) = &cell.classifier {
        f.save(dir.join("classifier.l2aw"))?;
    }
    if let Some(g) = &cell.generator {
        g.save(dir.join("generator.l2aw"))?;
    }
    if let Some(log) = &cell.log {
        log.write_csv(dir.join("train_log.csv"))?;
    }
    println!(
        "{} target {} seed {}: accuracy {:.2}",
        cfg.method.name(),
        target,
        seed,
        cell.accuracy.unwrap_or(f64::NAN)
    );
    Ok(true)
}

fn eval(cfg: &ExperimentConfig, weights: Option<PathBuf>) -> Result<bool> {
    let path = weights.unwrap_or_else(|| cfg.out_dir.join("classifier.l2aw"));
    let f = TaskClassifierWeights::load(&path)?;
    let domains = cfg.build_domains()?;
    let mut csv = String::from("domain,role,accuracy\n");
    for ds in &domains {
        let role = if cfg.targets.contains(&ds.domain()) {
            "target"
        } else {
            "source"
        };
        let acc = evaluate_accuracy(&f, ds)?;
        let _ = writeln!(csv, "{},{role},{acc}", ds.domain());
        println!("domain {} ({role}) accuracy {acc:.2}", ds.domain());
    }
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("eval.csv"), &csv)?;
    Ok(true)
}

fn lodo(cfg: &ExperimentConfig) -> Result<bool> {
    let domains = cfg.build_domains()?;
    let mut exp = Experiment::new(&domains, cfg)?;
    let reports = exp.lodo(cfg.method, &cfg.targets)?;
    for r in &reports {
        println!(
            "{} target {}: mean {:.2} std {:.2} over {} seeds",
            r.method.name(),
            r.target,
            r.mean,
            r.std,
            r.cells.len()
        );
        for c in r.cells.iter().filter(|c| c.error.is_some()) {
            eprintln!("seed {} failed: {}", c.seed, c.error.as_deref().unwrap_or(""));
        }
    }
    ensure_dir(&cfg.out_dir)?;
    write(
        &cfg.out_dir.join(format!("report_{}.csv", cfg.method.name())),
        &reports_csv(&reports),
    )?;
    Ok(true)
}

fn kn_sweep(cfg: &ExperimentConfig) -> Result<bool> {
    let domains = cfg.build_domains()?;
    let mut exp = Experiment::new(&domains, cfg)?;
    let rows = exp.kn_sweep(&cfg.kn_values(), &cfg.targets)?;
    for r in &rows {
        let note = if r.diversity_degenerate {
            " (diversity term degenerate)"
        } else {
            ""
        };
        println!("K_n {}: mean {:.2} std {:.2}{note}", r.kn, r.mean_acc, r.std_acc);
    }
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("kn_sweep.csv"), &sweep_csv(&rows))?;
    Ok(true)
}

fn embeddings(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = &cfg.out_dir;
    let phi = CriticWeights::load(dir.join("critic.l2aw"))?;
    let generator = GeneratorWeights::load(dir.join("generator.l2aw"))?;
    let domains = cfg.build_domains()?;
    let target = first(&cfg.targets, "target")?;
    let mut exp = Experiment::new(&domains, cfg)?;
    let val = exp.source_val(target)?;
    let target_ds: &DomainDataset = &domains[target];
    let dump = export_embeddings(&phi, &generator, &val, Some(target_ds), cfg.embedding_samples)?;
    dump.write_csv(dir.join("embeddings.csv"))?;
    println!(
        "wrote {} ({} rows)",
        dir.join("embeddings.csv").display(),
        dump.rows.len()
    );
    Ok(true)
}
