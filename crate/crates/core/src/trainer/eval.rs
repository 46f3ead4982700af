use rayon::prelude::*;

use crate::datapipe::{from_model_space, to_model_space, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{batch_report, Metric, MetricsReport, Scored};
use crate::netarch::{generator_forward, Model};

/// The image mapping under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum EvalModel<'a> {
    /// Returns the input unchanged; scores the raw degraded images.
    Identity,
    Generator(&'a Model),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Enhanced images against the clean references.
    pub model: MetricsReport,
    /// Degraded inputs against the clean references.
    pub input: MetricsReport,
}

/// Runs a generator in eval mode on one 8-bit image.
pub fn enhance(generator: &Model, image: &ImageRecord) -> Result<ImageRecord> {
    let out = generator_forward(generator, &to_model_space(image))?;
    let mut record = from_model_space(&out, 0, image.id.clone())?;
    record.source = image.source.clone();
    Ok(record)
}

/// Scores the model and the raw inputs on one split.
pub fn evaluate(
    model: EvalModel<'_>,
    manifest: &DatasetManifest,
    split: Split,
    metrics: &[Metric],
) -> Result<EvalReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let pairs = ids
        .par_iter()
        .map(|id| -> Result<(ImageRecord, ImageRecord, ImageRecord)> {
            let files = manifest.files(id)?;
            let mut x = crate::datapipe::load_image(&manifest.root.join(&files.distorted))?;
            let mut y = crate::datapipe::load_image(&manifest.root.join(&files.clean))?;
            x.id = id.clone();
            y.id = id.clone();
            let out = match model {
                EvalModel::Identity => x.clone(),
                EvalModel::Generator(g) => enhance(g, &x)?,
            };
            Ok((x, y, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let scored = |candidate: fn(&(ImageRecord, ImageRecord, ImageRecord)) -> &ImageRecord| -> Vec<Scored<'_>> {
        pairs
            .iter()
            .map(|p| Scored {
                candidate: candidate(p),
                reference: Some(&p.1),
            })
            .collect()
    };
    Ok(EvalReport {
        model: batch_report(&scored(|p| &p.2), metrics)?,
        input: batch_report(&scored(|p| &p.0), metrics)?,
    })
}
