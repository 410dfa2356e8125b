//! Multi-domain datasets: the procedural glyph corpus, parametric domain
//! transforms, IDX ingestion, stratified splits and batch sampling.

mod glyph;
pub mod idx;
mod split;
mod transform;

pub use glyph::{generate_glyph_dataset, GlyphSpec, MIN_PER_CLASS, NUM_CLASSES};
pub use split::{make_splits, split_halves, BatchSampler, LabeledBatch, SplitSpec};
pub use transform::{apply_domain_transform, Background, DomainTransform};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::io::{read_container, write_container};
use crate::tensor::Tensor;

/// Images (`N×3×S×S` in `[-1, 1]`) and labels of one domain.
///
/// Every read of the image or label payload bumps a counter shared by all
/// clones, so an experiment can prove a held-out domain was never touched.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    domain: usize,
    images: Tensor,
    labels: Vec<usize>,
    provenance: String,
    reads: Arc<AtomicUsize>,
}

impl DomainDataset {
    pub fn new(domain: usize, images: Tensor, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::shape("dataset", format!("images {s:?} are not N×3×S×S")));
        }
        if s[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: s[0],
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: NUM_CLASSES,
            });
        }
        if images.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(
                "image values must be finite and in [-1, 1]".into(),
            ));
        }
        Ok(Self {
            domain,
            images,
            labels,
            provenance: provenance.into(),
            reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    /// The same data under another domain index (fresh audit counter).
    pub fn with_domain(&self, domain: usize) -> Self {
        Self {
            domain,
            reads: Arc::new(AtomicUsize::new(0)),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn images(&self) -> &Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// Number of payload reads so far.
    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Rows at `idx`, in order.
    pub fn subset(&self, idx: &[usize], provenance: impl Into<String>) -> Result<Self> {
        let images = self.images().select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.domain, images, labels, provenance)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Per-channel pixel means.
    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.image_size() * self.image_size();
        let mut m = [0.0; 3];
        for (i, chunk) in self.images().data().chunks(plane).enumerate() {
            m[i % 3] += chunk.iter().sum::<f64>();
        }
        let count = (self.len() * plane) as f64;
        m.map(|v| v / count)
    }

    /// SHA-256 over the shape, pixel bits and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes an `L2AW` cache with `images` and `labels`, plus a
    /// `<path>.provenance` text sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let labels = Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect());
        write_container(
            path,
            &[
                ("images".to_string(), self.images.clone()),
                ("labels".to_string(), labels),
            ],
        )?;
        let side = sidecar(path);
        let text = format!(
            "domain={}\ndigest={}\nprovenance={}\n",
            self.domain,
            self.digest(),
            self.provenance
        );
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut images = None;
        let mut labels = None;
        for (name, t) in read_container(path)? {
            match name.as_str() {
                "images" => images = Some(t),
                "labels" => labels = Some(t),
                other => return Err(Error::Malformed(format!("unexpected tensor `{other}` in dataset"))),
            }
        }
        let images = images.ok_or_else(|| Error::Malformed("dataset has no images".into()))?;
        let labels = labels.ok_or_else(|| Error::Malformed("dataset has no labels".into()))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Malformed(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut domain = 0;
        let mut provenance = String::new();
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("domain=") {
                domain = v.parse().map_err(|_| Error::Malformed(format!("bad domain `{v}`")))?;
            } else if let Some(v) = line.strip_prefix("provenance=") {
                provenance = v.to_string();
            }
        }
        Self::new(domain, images, labels, provenance)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DomainDataset {
        generate_glyph_dataset(&GlyphSpec {
            n_per_class: 20,
            image_size: 16,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn cache_round_trip() {
        let ds = tiny().with_domain(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.l2aw");
        ds.save(&p).unwrap();
        let back = DomainDataset::load(&p).unwrap();
        assert_eq!(back.domain(), 2);
        assert_eq!(back.digest(), ds.digest());
        assert_eq!(back.provenance(), ds.provenance());
    }

    #[test]
    fn audit_counter_is_shared_by_clones() {
        let ds = tiny();
        let c = ds.clone();
        assert_eq!(ds.access_count(), 0);
        let _ = c.images();
        assert_eq!(ds.access_count(), 1);
        assert_eq!(ds.with_domain(1).access_count(), 0);
    }

    #[test]
    fn class_means_differ() {
        let ds = tiny();
        let plane = 3 * 16 * 16;
        let mut means = vec![vec![0.0; plane]; NUM_CLASSES];
        for (i, &l) in ds.labels().iter().enumerate() {
            for (m, v) in means[l].iter_mut().zip(&ds.images().data()[i * plane..(i + 1) * plane]) {
                *m += v / 20.0;
            }
        }
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                let gap: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(gap > 1.0, "classes {a} and {b}: {gap}");
            }
        }
    }
}
