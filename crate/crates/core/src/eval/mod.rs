//! Frozen-encoder evaluation: feature extraction, linear probing, RankMe,
//! embedding export and the mode comparison report.

mod export;
mod probe;
mod rankme;
mod report;

pub use export::{export_embeddings, read_embeddings};
pub use probe::{linear_probe, ProbeConfig, ProbeOptimizer, ProbeResult};
pub use rankme::{rankme, rankme_with, RankMeOptions, RANKME_EPS};
pub use report::{ablation_report, task_group, AblationReport, ReportRow, TaskGroup, REPORT_CSV_HEADER};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig, PositionalTables};
use crate::patching::patchify;
use crate::tensor::Matrix;

/// Which last-layer token(s) summarize an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// The `[CLS]` token.
    #[default]
    Cls,
    /// Mean of the patch tokens.
    MeanPool,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Cls => "cls",
            FeatureKind::MeanPool => "mean_pool",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FeatureKind::Cls),
            "mean_pool" => Ok(FeatureKind::MeanPool),
            other => Err(Error::config("feature", format!("expected cls or mean_pool, got `{other}`"))),
        }
    }
}

/// One feature row per image, plus the image labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub features: Matrix,
    pub kind: FeatureKind,
    pub source: String,
    pub ids: Vec<usize>,
    pub labels: BTreeMap<String, Vec<usize>>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn task_labels(&self, task: &str) -> Result<&[usize]> {
        self.labels
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no labels for task `{task}`")))
    }
}

/// Runs `encoder` over every patch of each image (no masking) and keeps the
/// requested summary of its last-layer output.
pub fn extract_features(
    encoder: &Encoder,
    config: &ModelConfig,
    samples: &[ImageSample],
    kind: FeatureKind,
    source: &str,
) -> Result<EmbeddingMatrix> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no samples to embed".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.size() != config.image_size) {
        return Err(Error::ConfigMismatch(format!(
            "{}px image for a model trained on {}px",
            s.size(),
            config.image_size
        )));
    }
    let tables = PositionalTables::new(config)?;
    let indices: Vec<usize> = (0..config.n_patches()).collect();
    let rows: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .map(|s| {
            let seq = patchify(&s.image, config.patch_size)?;
            let (tokens, _) = encoder.forward(&seq.patches, &indices, &tables.encoder)?;
            Ok(match kind {
                FeatureKind::Cls => tokens.row(0).to_vec(),
                FeatureKind::MeanPool => {
                    let mut mean = vec![0.0; tokens.cols()];
                    for r in 1..tokens.rows() {
                        for (m, v) in mean.iter_mut().zip(tokens.row(r)) {
                            *m += v;
                        }
                    }
                    let n = (tokens.rows() - 1) as f64;
                    mean.iter_mut().for_each(|m| *m /= n);
                    mean
                }
            })
        })
        .collect();
    let d = encoder.dim();
    let mut data = Vec::with_capacity(samples.len() * d);
    for r in rows {
        data.extend(r?);
    }
    let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let tasks: Vec<&String> = samples[0].labels.keys().collect();
    for task in tasks {
        let col: Option<Vec<usize>> = samples.iter().map(|s| s.label(task)).collect();
        if let Some(col) = col {
            labels.insert(task.clone(), col);
        }
    }
    Ok(EmbeddingMatrix {
        features: Matrix::from_vec(samples.len(), d, data),
        kind,
        source: source.to_string(),
        ids: (0..samples.len()).collect(),
        labels,
    })
}

/// Order-sensitive hash of every parameter bit pattern.
pub fn fingerprint<T: crate::model::NamedTensors>(params: &T) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, t) in params.tensors() {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}
