//! Prompted-feature export for external visualization.
//!
//! CSV columns: `kind,index,label,predicted_task,f0..f{D-1}`. Sample rows
//! (`kind = sample`) come first in dataset order; one `mean` row per label
//! follows, with `index` holding the sample count and no predicted task.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::pipeline::PrePrompt;
use crate::translation::compute_prototype;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    pub label: u32,
    pub predicted_task: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embeddings {
    pub dim: usize,
    pub samples: Vec<EmbeddedSample>,
    /// (label, sample count, mean feature), by ascending label.
    pub means: Vec<(u32, usize, Vec<f64>)>,
}

/// Embeds every sample of `set` under its predicted prompt.
pub fn compute_embeddings(model: &PrePrompt, set: &LabeledImageSet) -> Result<Embeddings> {
    let dim = model.backbone().config.embed_dim;
    let samples: Vec<EmbeddedSample> = (0..set.len())
        .map(|i| {
            let (task, feature) = model.embed(set.image(i))?;
            Ok(EmbeddedSample {
                label: set.label(i),
                predicted_task: task,
                feature,
            })
        })
        .collect::<Result<_>>()?;
    let mut by_label: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &samples {
        by_label.entry(s.label).or_default().extend_from_slice(&s.feature);
    }
    let means = by_label
        .into_iter()
        .map(|(label, data)| {
            let n = data.len() / dim;
            let m = Matrix::new(n, dim, data)?;
            Ok((label, n, compute_prototype(&m)?))
        })
        .collect::<Result<_>>()?;
    Ok(Embeddings { dim, samples, means })
}

pub fn write_embeddings_csv(emb: &Embeddings, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::domain(format!("{other:?}")),
    })?;
    let mut header = vec!["kind".to_string(), "index".into(), "label".into(), "predicted_task".into()];
    header.extend((0..emb.dim).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    let num = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>();
    for (i, s) in emb.samples.iter().enumerate() {
        let mut rec = vec!["sample".to_string(), i.to_string(), s.label.to_string(), s.predicted_task.to_string()];
        rec.extend(num(&s.feature));
        w.write_record(&rec)?;
    }
    for (label, n, mean) in &emb.means {
        let mut rec = vec!["mean".to_string(), n.to_string(), label.to_string(), String::new()];
        rec.extend(num(mean));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// [`compute_embeddings`] then [`write_embeddings_csv`].
pub fn export_embeddings(model: &PrePrompt, set: &LabeledImageSet, path: &Path) -> Result<Embeddings> {
    let emb = compute_embeddings(model, set)?;
    write_embeddings_csv(&emb, path)?;
    Ok(emb)
}

/// Parses a file written by [`write_embeddings_csv`].
pub fn read_embeddings_csv(path: &Path) -> Result<Embeddings> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::domain(format!("{other:?}")),
    })?;
    let dim = r.headers()?.len().saturating_sub(4);
    let mut emb = Embeddings {
        dim,
        ..Default::default()
    };
    let bad = |what: &str| Error::domain(format!("{}: bad {what}", path.display()));
    for rec in r.records() {
        let rec = rec?;
        let feature: Vec<f64> = rec
            .iter()
            .skip(4)
            .map(|v| v.parse().map_err(|_| bad("feature value")))
            .collect::<Result<_>>()?;
        let label: u32 = rec[2].parse().map_err(|_| bad("label"))?;
        match &rec[0] {
            "sample" => emb.samples.push(EmbeddedSample {
                label,
                predicted_task: rec[3].parse().map_err(|_| bad("predicted task"))?,
                feature,
            }),
            "mean" => emb
                .means
                .push((label, rec[1].parse().map_err(|_| bad("count"))?, feature)),
            _ => return Err(bad("row kind")),
        }
    }
    Ok(emb)
}
