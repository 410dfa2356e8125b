use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val > 0.0 && self.train + self.val <= 1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "split fractions ({}, {}) must be positive with sum <= 1",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

fn take(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Stratified, disjoint train/val split; membership depends only on the
/// seed and the label vector. Both outputs list rows in ascending order.
pub fn make_splits(ds: &DomainDataset, s: &SplitSpec) -> Result<(DomainDataset, DomainDataset)> {
    s.validate()?;
    let labels = ds.labels();
    let mut by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let (nt, nv) = (take(s.train, idx.len()), take(s.val, idx.len()));
        if nt == 0 || nv == 0 {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..nt]);
        val.extend_from_slice(&idx[nt..nt + nv]);
    }
    train.sort_unstable();
    val.sort_unstable();
    let tag = |part: &str| format!("{} | {part}(seed={})", ds.provenance(), s.seed);
    Ok((ds.subset(&train, tag("train"))?, ds.subset(&val, tag("val"))?))
}

/// A mini-batch drawn from one domain.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub domain: usize,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Epoch-wise shuffling without replacement. The stream of emitted indices
/// is the concatenation of one fresh permutation per epoch, so a batch that
/// straddles an epoch boundary finishes the old permutation first.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || !batch.is_multiple_of(2) || batch > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch} must be even, positive and <= {n}"
            )));
        }
        Ok(Self {
            n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: Vec::new(),
            pos: 0,
            epoch: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Completed reshuffles so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.perm.len() {
                self.perm = (0..self.n).collect();
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let k = (self.batch - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }

    pub fn sample(&mut self, ds: &DomainDataset) -> Result<LabeledBatch> {
        if ds.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "sampler built for {} rows, dataset has {}",
                self.n,
                ds.len()
            )));
        }
        let indices = self.next_indices();
        let labels = ds.labels();
        Ok(LabeledBatch {
            domain: ds.domain(),
            images: ds.images().select_rows(&indices)?,
            labels: indices.iter().map(|&i| labels[i]).collect(),
            indices,
        })
    }
}

/// First and second half of an even-sized batch.
pub fn split_halves(b: &LabeledBatch) -> Result<(LabeledBatch, LabeledBatch)> {
    let n = b.len();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("cannot halve a batch of {n}")));
    }
    let h = n / 2;
    let half = |lo: usize, hi: usize| -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            domain: b.domain,
            images: b.images.slice_rows(lo, hi)?,
            labels: b.labels[lo..hi].to_vec(),
            indices: b.indices[lo..hi].to_vec(),
        })
    };
    Ok((half(0, h)?, half(h, n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_glyph_dataset, GlyphSpec};

    fn ds() -> DomainDataset {
        generate_glyph_dataset(&GlyphSpec {
            n_per_class: 50,
            image_size: 16,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn stratified_counts() {
        let d = ds();
        let s = SplitSpec {
            train: 0.9,
            val: 0.1,
            seed: 5,
        };
        let (tr, va) = make_splits(&d, &s).unwrap();
        assert_eq!((tr.len(), va.len()), (450, 50));
        assert_eq!(tr.class_histogram(), [45; 10]);
        assert_eq!(va.class_histogram(), [5; 10]);
        let (tr2, _) = make_splits(&d, &s).unwrap();
        assert_eq!(tr.digest(), tr2.digest());
    }

    #[test]
    fn tiny_class_is_rejected() {
        let d = ds();
        let s = SplitSpec {
            train: 0.99,
            val: 0.01,
            seed: 0,
        };
        assert!(matches!(make_splits(&d, &s), Err(Error::ClassTooSmall { .. })));
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_indices()).collect();
        assert_eq!(seen.len(), 20);
        let second: Vec<usize> = seen.split_off(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut second = second;
        second.sort_unstable();
        assert_eq!(second, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn halves_are_disjoint() {
        let d = ds();
        let mut s = BatchSampler::new(d.len(), 8, 2).unwrap();
        let b = s.sample(&d).unwrap();
        let (x, y) = split_halves(&b).unwrap();
        assert_eq!((x.len(), y.len()), (4, 4));
        assert!(x.indices.iter().all(|i| !y.indices.contains(i)));
        assert!(BatchSampler::new(10, 3, 0).is_err());
        assert!(BatchSampler::new(10, 12, 0).is_err());
    }
}
