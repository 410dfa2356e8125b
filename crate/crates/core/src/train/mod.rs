//! Pretraining of the label predictor and critic, the loss terms, the
//! optimizers and the alternating generator / classifier loop.

mod losses;
mod optim;
mod pretrain;
mod run;

pub use losses::{
    generator_loss, loss_ce_generated, loss_cycle, loss_diversity, loss_novel, paired_energy_distance, task_loss,
    Diversity, GeneratorTerms, LossWeights, TaskTerms,
};
pub use optim::{AdamConfig, AdamState, SgdConfig, SgdState};
pub use pretrain::{pretrain_critic, pretrain_task_classifier, PretrainConfig, Pretrained};
pub use run::{run_training, IterRecord, TrainLog, TrainOutcome, TrainState, LOG_HEADER};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ot::SinkhornSettings;

/// Novel label `k̃ ∈ 0..K_n` for each source `k ∈ 0..K_s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NovelAssignment(pub Vec<usize>);

impl NovelAssignment {
    pub fn is_injective(&self) -> bool {
        let mut v = self.0.clone();
        v.sort_unstable();
        v.windows(2).all(|w| w[0] != w[1])
    }
}

/// A uniform injection when `K_n ≥ K_s` (a random permutation prefix);
/// otherwise independent uniform draws, so collisions are unavoidable.
pub fn assign_novel_domains(k_s: usize, k_n: usize, rng: &mut impl Rng) -> Result<NovelAssignment> {
    if k_n == 0 {
        return Err(Error::InvalidArgument("K_n must be at least 1".into()));
    }
    if k_n >= k_s {
        let mut all: Vec<usize> = (0..k_n).collect();
        all.shuffle(rng);
        all.truncate(k_s);
        Ok(NovelAssignment(all))
    } else {
        Ok(NovelAssignment((0..k_s).map(|_| rng.random_range(0..k_n)).collect()))
    }
}

/// SplitMix64 finalizer, for deriving independent sub-seeds.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of novel domains; `0` means "same as the number of sources".
    pub k_n: usize,
    pub iterations: usize,
    pub batch_per_source: usize,
    pub generator_widths: [usize; 3],
    pub adam: AdamConfig,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
    /// Include the pairwise diversity term.
    pub diversity: bool,
    pub sinkhorn: SinkhornSettings,
    pub seed: u64,
    /// Write weight checkpoints every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Record wall-clock seconds in the log; off by default so reruns
    /// produce byte-identical logs.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_n: 0,
            iterations: 3000,
            batch_per_source: 8,
            generator_widths: [16, 32, 64],
            adam: AdamConfig::default(),
            sgd: SgdConfig::default(),
            weights: LossWeights::default(),
            diversity: true,
            sinkhorn: SinkhornSettings::default(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn novel_domains(&self, k_s: usize) -> usize {
        if self.k_n == 0 {
            k_s
        } else {
            self.k_n
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sinkhorn.validate()?;
        if self.batch_per_source < 2 || !self.batch_per_source.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "batch per source {} must be even and at least 2",
                self.batch_per_source
            )));
        }
        if !(self.adam.lr > 0.0 && self.sgd.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.generator_widths.contains(&0) {
            return Err(Error::InvalidArgument("generator widths must be positive".into()));
        }
        Ok(())
    }
}
