use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::experiment::write_text;
use super::pca::{pca_2d, Pca};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{Binding, CriticWeights, DomainCode, GeneratorWeights};
use crate::tensor::{Graph, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    /// `source<k>`, `generated<k̃>` or `target`.
    pub tag: String,
    pub label: usize,
    pub coords: [f64; 2],
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
    pub pca: Pca,
}

impl EmbeddingDump {
    pub fn to_csv(&self) -> String {
        let dim = self.rows.first().map_or(0, |r| r.feature.len());
        let mut s = String::from("tag,label,pc1,pc2");
        for i in 0..dim {
            let _ = write!(s, ",f{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.tag, r.label, r.coords[0], r.coords[1]);
            for v in &r.feature {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }

    /// Mean feature of the rows whose tag starts with `prefix`.
    pub fn centroid(&self, prefix: &str) -> Option<Vec<f64>> {
        let rows: Vec<&EmbeddingRow> = self.rows.iter().filter(|r| r.tag.starts_with(prefix)).collect();
        let first = rows.first()?;
        let mut c = vec![0.0; first.feature.len()];
        for r in &rows {
            for (a, b) in c.iter_mut().zip(&r.feature) {
                *a += b / rows.len() as f64;
            }
        }
        Some(c)
    }
}

fn run_single(images: &Tensor, build: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input("x", images.shape());
    let out = build(&mut g, x)?;
    let mut sess = Session::new(&g);
    sess.forward(&BTreeMap::from([("x".to_string(), images.clone())]))?;
    sess.value(out)
        .cloned()
        .ok_or_else(|| Error::Malformed("missing output".into()))
}

/// Embeds source-val samples, their translations into every novel domain
/// (source `k̃ mod K_s` feeds novel domain `k̃`) and target samples with the
/// critic, then projects the pooled features onto two principal axes.
/// At most `per_group` samples are taken from each group.
pub fn export_embeddings(
    phi: &CriticWeights,
    generator: &GeneratorWeights,
    source_val: &[DomainDataset],
    target: Option<&DomainDataset>,
    per_group: usize,
) -> Result<EmbeddingDump> {
    let k_s = source_val.len();
    let total = generator.spec().num_domains;
    if k_s == 0 || total <= k_s {
        return Err(Error::InvalidArgument(format!(
            "{k_s} sources for a generator with {total} domain codes"
        )));
    }
    let k_n = total - k_s;
    let embed = |images: &Tensor| run_single(images, |g, x| phi.embed(g, &Binding::frozen("phi."), x));
    let head = |ds: &DomainDataset| -> Result<(Tensor, Vec<usize>)> {
        let n = ds.len().min(per_group);
        Ok((ds.images().slice_rows(0, n)?, ds.labels()[..n].to_vec()))
    };
    let mut groups: Vec<(String, Tensor, Vec<usize>)> = Vec::new();
    for (k, ds) in source_val.iter().enumerate() {
        let (x, y) = head(ds)?;
        groups.push((format!("source{k}"), x, y));
    }
    for kn in 0..k_n {
        let (x, y) = head(&source_val[kn % k_s])?;
        let codes = vec![DomainCode::new(k_s + kn, total)?; y.len()];
        let gen = run_single(&x, |g, v| generator.forward(g, &Binding::frozen("g."), v, &codes))?;
        groups.push((format!("generated{kn}"), gen, y));
    }
    if let Some(t) = target {
        let (x, y) = head(t)?;
        groups.push(("target".to_string(), x, y));
    }
    let mut rows = Vec::new();
    for (tag, x, labels) in groups {
        let f = embed(&x)?;
        let dim = f.shape()[1];
        for (feat, &label) in f.data().chunks(dim).zip(&labels) {
            rows.push(EmbeddingRow {
                tag: tag.clone(),
                label,
                coords: [0.0; 2],
                feature: feat.to_vec(),
            });
        }
    }
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.feature.clone()).collect();
    let pca = pca_2d(&feats)?;
    for r in &mut rows {
        r.coords = pca.project(&r.feature);
    }
    Ok(EmbeddingDump { rows, pca })
}
