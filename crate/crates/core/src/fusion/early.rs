use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{rank, train_softmax_head, HeadConfig, SoftmaxHead};
use crate::codec::{check_version, decode_rows, decode_vec, encode_rows, encode_vec, FORMAT_VERSION};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::expert::{expert_config, ExpertCheckpoint, ExpertModel, TrainConfig};
use crate::scalar::Scalar;

/// Early-fusion baseline: the experts' encodings concatenated into one
/// feature vector and a single Ω-way softmax on top.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyFusionModel<F> {
    pub experts: Vec<ExpertModel<F>>,
    pub head: SoftmaxHead<F>,
}

/// Width of the concatenated encoding; errors when experts disagree on `d`.
pub fn concatenated_dim<F: Scalar>(experts: &[ExpertModel<F>]) -> Result<usize> {
    let d = experts.first().ok_or_else(|| Error::invalid("early fusion needs at least one expert"))?.encoding_dim();
    if experts.iter().any(|e| e.encoding_dim() != d) {
        return Err(Error::invalid("experts have different encoding dimensions"));
    }
    Ok(d * experts.len())
}

pub fn concatenated_encoding<F: Scalar>(experts: &[ExpertModel<F>], x: &[F]) -> Result<Vec<F>> {
    let mut out = Vec::new();
    for e in experts {
        out.extend(e.encode(x)?);
    }
    Ok(out)
}

pub fn early_fusion_train<F: Scalar>(
    experts: Vec<ExpertModel<F>>,
    dataset: &Dataset<F>,
    cfg: &HeadConfig,
) -> Result<EarlyFusionModel<F>> {
    concatenated_dim(&experts)?;
    let features = dataset
        .train()
        .par_iter()
        .map(|&i| concatenated_encoding(&experts, dataset.sample(i)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&[F]> = features.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = dataset.train().iter().map(|&i| dataset.label(i)).collect();
    let head = train_softmax_head(&views, &labels, dataset.n_classes(), cfg)?;
    Ok(EarlyFusionModel { experts, head })
}

impl<F: Scalar> EarlyFusionModel<F> {
    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn probabilities(&self, x: &[F]) -> Result<Vec<F>> {
        self.head.probabilities(&concatenated_encoding(&self.experts, x)?)
    }

    pub fn predict(&self, x: &[F], k: usize) -> Result<Vec<(usize, F)>> {
        rank(&self.probabilities(x)?, k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EarlyCheckpoint {
    format_version: u32,
    expert_checkpoint_paths: Vec<String>,
    inputs: usize,
    weights: Vec<Vec<String>>,
    bias: Vec<String>,
}

impl<F: Scalar> EarlyFusionModel<F> {
    pub fn save(&self, dir: impl AsRef<Path>, expert_base: &TrainConfig) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.experts.len());
        for (j, expert) in self.experts.iter().enumerate() {
            let name = format!("expert_{j:03}.json");
            ExpertCheckpoint::from_model(expert, &expert_config(expert_base, j)).save(dir.join(&name))?;
            paths.push(name);
        }
        let checkpoint = EarlyCheckpoint {
            format_version: FORMAT_VERSION,
            expert_checkpoint_paths: paths,
            inputs: self.head.input_dim(),
            weights: encode_rows(&self.head.weights),
            bias: encode_vec(&self.head.bias),
        };
        let path = dir.join("early.json");
        std::fs::write(&path, serde_json::to_string_pretty(&checkpoint)?)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let checkpoint: EarlyCheckpoint = serde_json::from_str(&Error::read_text(path)?)?;
        check_version(checkpoint.format_version)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let experts = checkpoint
            .expert_checkpoint_paths
            .iter()
            .map(|p| ExpertCheckpoint::load(base.join(p))?.to_model())
            .collect::<Result<Vec<_>>>()?;
        let head = SoftmaxHead {
            weights: decode_rows(&checkpoint.weights, checkpoint.inputs)?,
            bias: decode_vec(&checkpoint.bias)?,
        };
        if head.weights.rows() != head.bias.len() || concatenated_dim(&experts)? != head.input_dim() {
            return Err(Error::invalid("early-fusion head shape does not match its experts"));
        }
        Ok(Self { experts, head })
    }
}
