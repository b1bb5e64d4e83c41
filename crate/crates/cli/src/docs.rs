//! JSON documents written by the commands.

use lmd_core::model::nested;
use lmd_core::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub modality: String,
    #[serde(with = "nested")]
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub id: String,
    pub kind: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub version: u32,
    pub variant: String,
    pub epsilon: f64,
    pub index: usize,
    pub output: String,
    pub shape: Vec<usize>,
    /// Modality components in model order, then `bias`.
    pub components: Vec<NamedTensor>,
    pub layers: Vec<LayerResidual>,
    pub max_equality_residual: f64,
    pub max_residual_layer: String,
    pub clamped_neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub version: u32,
    pub method: String,
    pub index: usize,
    pub shape: Vec<usize>,
    pub evaluations: usize,
    /// Modality attributions in model order, then `base`.
    pub components: Vec<NamedTensor>,
    pub efficiency_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub version: u32,
    pub stride: usize,
    pub offsets: Vec<usize>,
    pub samples: usize,
    pub positive_part: bool,
    pub reports: Vec<lmd_core::metrics::SeparationReport>,
}
