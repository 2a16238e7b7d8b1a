//! Feature export for external projection tools. Real images are tagged
//! `target`, replayed synthetic images `source`.

use std::fs::File;
use std::path::{Path, PathBuf};

use dfcil_core::checkpoint::Checkpoint;
use dfcil_core::datasets::{load_dataset, ImageShape, SplitTag};
use dfcil_core::losses::Domain;
use dfcil_core::synthesis::load_replay;
use dfcil_tensor::Tensor;
use dfcil_core::{Error, Result};

#[derive(Clone, Debug)]
pub struct ExportRequest {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub split: SplitTag,
    /// Keep at most this many real images per class.
    pub per_class: Option<usize>,
    /// Only these classes; empty keeps the checkpoint's seen classes.
    pub classes: Vec<usize>,
    pub replay: Vec<PathBuf>,
    pub out: PathBuf,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Columns `domain,label,f0..f{F-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(File::create(path)?);
        let dim = self.features.shape().get(1).copied().unwrap_or(0);
        let mut header = vec!["domain".to_string(), "label".to_string()];
        header.extend((0..dim).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(io)?;
        for (i, (&label, dom)) in self.labels.iter().zip(&self.domains).enumerate() {
            let mut rec = vec![dom.as_str().to_string(), label.to_string()];
            rec.extend(self.features.data()[i * dim..(i + 1) * dim].iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn expected_shape(ckpt: &Checkpoint) -> Option<ImageShape> {
    ckpt.mean_images.values().next().map(|m| m.shape)
}

fn check_shape(what: &str, got: &[usize], want: Option<ImageShape>, channels: usize) -> Result<()> {
    let ok = match want {
        Some(s) => got[1..] == [s.channels, s.height, s.width],
        None => got[1] == channels,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} images are {:?} but the checkpoint expects {}",
            &got[1..],
            match want {
                Some(s) => format!("[{}, {}, {}]", s.channels, s.height, s.width),
                None => format!("{channels} channels"),
            }
        )))
    }
}

/// Eval-mode features of real and synthetic images under a checkpoint.
pub fn embed(req: &ExportRequest) -> Result<Embeddings> {
    let ckpt = Checkpoint::load(&req.checkpoint)?;
    let model = &ckpt.model;
    let want = expected_shape(&ckpt);
    let channels = model.config.in_channels;
    let mut parts: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();

    if let Some(path) = &req.data {
        let pad = want.map_or(0, |s| s.height);
        let ds = load_dataset(path, pad)?;
        let classes = if req.classes.is_empty() { ckpt.seen_classes.clone() } else { req.classes.clone() };
        let set = ds.split(req.split);
        let mut idx = Vec::new();
        for &c in &classes {
            let mut of = set.indices_of_class(c);
            if let Some(n) = req.per_class {
                of.truncate(n);
            }
            idx.extend(of);
        }
        if !idx.is_empty() {
            let x = set.batch_tensor(&idx);
            check_shape("data", x.shape(), want, channels)?;
            parts.push(model.embed(&x, req.chunk)?);
            labels.extend(set.batch_labels(&idx));
            domains.extend(std::iter::repeat_n(Domain::Target, idx.len()));
        }
    }
    for path in &req.replay {
        for batch in load_replay(path)? {
            check_shape("replay", batch.images.shape(), want, channels)?;
            parts.push(model.embed(&batch.images, req.chunk)?);
            domains.extend(std::iter::repeat_n(Domain::Source, batch.labels.len()));
            labels.extend(batch.labels);
        }
    }
    let features = if parts.is_empty() {
        Tensor::zeros(&[0, model.feature_dim()])
    } else {
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    };
    if features.shape()[0] != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", features.shape()[0], labels.len())));
    }
    Ok(Embeddings { features, labels, domains })
}

pub fn export(req: &ExportRequest) -> Result<Embeddings> {
    if req.data.is_none() && req.replay.is_empty() {
        return Err(Error::Config("nothing to export: give --data and/or --replay".into()));
    }
    let e = embed(req)?;
    e.write_csv(&req.out)?;
    Ok(e)
}
