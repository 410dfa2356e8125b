//! Accuracy, leave-one-domain-out experiments, the novel-domain sweep and
//! embedding export.

mod embed;
mod experiment;
mod pca;

pub use embed::{export_embeddings, EmbeddingDump, EmbeddingRow};
pub use experiment::{
    kn_sweep, leave_one_domain_out, reports_csv, sweep_csv, CellResult, Experiment, ExperimentReport, Method, SweepRow,
    REPORT_HEADER, SWEEP_HEADER,
};
pub use pca::{pca_2d, symmetric_eigen, Pca};

use std::collections::BTreeMap;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{Binding, TaskClassifierWeights};
use crate::tensor::{Graph, Session, Tensor, Var};

const CHUNK: usize = 100;

/// Row-wise argmax of logits computed chunk by chunk; ties go to the lower
/// class index.
pub fn argmax_predictions(images: &Tensor, logits: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = images.slice_rows(start, end)?;
        let mut g = Graph::new();
        let xv = g.input("x", x.shape());
        let l = logits(&mut g, xv)?;
        let mut sess = Session::new(&g);
        sess.forward(&BTreeMap::from([("x".to_string(), x)]))?;
        let t = sess.value(l).ok_or_else(|| Error::Malformed("logits missing".into()))?;
        let c = t.shape()[1];
        for row in t.data().chunks(c) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn evaluate_accuracy(f: &TaskClassifierWeights, ds: &DomainDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let pred = argmax_predictions(ds.images(), |g, x| Ok(f.forward(g, &Binding::frozen("f."), x)?.0))?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / ds.len() as f64)
}

/// Arithmetic mean and sample standard deviation (`n − 1`; zero for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
