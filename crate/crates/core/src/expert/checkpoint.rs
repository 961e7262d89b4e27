use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Backbone, Dense, ExpertModel};
use super::train::TrainConfig;
use crate::codec::{check_version, decode_rows, decode_vec, encode_rows, encode_vec, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::taskgroups::TaskGroup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    weights: Vec<Vec<String>>,
    bias: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BackboneRecord {
    input_shift: Vec<String>,
    input_scale: Vec<String>,
    layers: Vec<LayerRecord>,
}

/// Versioned JSON document for one trained expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCheckpoint {
    pub format_version: u32,
    pub group: TaskGroup,
    pub config: TrainConfig,
    backbone_params: BackboneRecord,
    #[serde(rename = "W0")]
    w0: Vec<String>,
    #[serde(rename = "V")]
    v: Vec<Vec<String>>,
    w_nig: Vec<String>,
    b: Vec<String>,
    loss_trajectory: Vec<String>,
}

impl ExpertCheckpoint {
    pub fn from_model<F: Scalar>(model: &ExpertModel<F>, config: &TrainConfig) -> Self {
        let backbone = &model.backbone;
        Self {
            format_version: FORMAT_VERSION,
            group: model.group.clone(),
            config: config.clone(),
            backbone_params: BackboneRecord {
                input_shift: encode_vec(&backbone.input_shift),
                input_scale: encode_vec(&backbone.input_scale),
                layers: backbone
                    .layers
                    .iter()
                    .map(|l| LayerRecord {
                        inputs: l.weights.cols(),
                        weights: encode_rows(&l.weights),
                        bias: encode_vec(&l.bias),
                    })
                    .collect(),
            },
            w0: encode_vec(&model.w0),
            v: encode_rows(&model.v),
            w_nig: encode_vec(&model.w_nig),
            b: encode_vec(&model.bias),
            loss_trajectory: encode_vec(&model.loss_trajectory),
        }
    }

    pub fn to_model<F: Scalar>(&self) -> Result<ExpertModel<F>> {
        check_version(self.format_version)?;
        let record = &self.backbone_params;
        let layers = record
            .layers
            .iter()
            .map(|l| Ok(Dense { weights: decode_rows(&l.weights, l.inputs)?, bias: decode_vec(&l.bias)? }))
            .collect::<Result<Vec<_>>>()?;
        let backbone = Backbone {
            input_shift: decode_vec(&record.input_shift)?,
            input_scale: decode_vec(&record.input_scale)?,
            layers,
        };
        let d = backbone.output_dim();
        let m = self.group.size();
        let model = ExpertModel {
            group: self.group.clone(),
            backbone,
            w0: decode_vec(&self.w0)?,
            v: decode_rows(&self.v, d)?,
            w_nig: decode_vec(&self.w_nig)?,
            bias: decode_vec(&self.b)?,
            loss_trajectory: decode_vec(&self.loss_trajectory)?,
        };
        if model.w0.len() != d || model.w_nig.len() != d || model.v.rows() != m || model.bias.len() != m + 1 {
            return Err(Error::invalid("checkpoint head shapes do not match its group and backbone"));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let checkpoint: Self = serde_json::from_str(text)?;
        check_version(checkpoint.format_version)?;
        Ok(checkpoint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&Error::read_text(path)?)
    }
}
