//! Layer-wise modality decomposition.
//!
//! [`record`] runs the original network once and caches what the
//! linearization needs: chord slopes of activation and softmax layers and the
//! live statistics of LayerNorm / InstanceNorm. [`propagate`] then pushes a
//! [`DecomposedTensor`] (one component per modality plus a bias component)
//! through the linearized network. [`decompose`] does both.

mod propagate;
mod record;
pub mod rules;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityId;
use crate::tensor::Tensor;

pub use propagate::{decompose, equality_residuals, propagate, propagate_output, Decomposition};
pub use record::{chord_ratio, record, LayerCache, NormStats, RatioCache, RecordedState};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// `M + 1` same-shape components; slot `M` is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedTensor {
    components: Vec<Tensor>,
}

impl DecomposedTensor {
    pub fn new(components: Vec<Tensor>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::Config(
                "a decomposition needs at least one modality and the bias".into(),
            ));
        }
        let shape = components[0].shape();
        if let Some(bad) = components.iter().find(|t| t.shape() != shape) {
            return Err(Error::shape(
                "decomposition",
                format!("component shapes {:?} vs {:?}", bad.shape(), shape),
            ));
        }
        Ok(DecomposedTensor { components })
    }

    pub fn zeros(shape: &[usize], modalities: usize) -> Self {
        DecomposedTensor {
            components: vec![Tensor::zeros(shape); modalities + 1],
        }
    }

    /// Number of input modalities (components minus the bias).
    pub fn modalities(&self) -> usize {
        self.components.len() - 1
    }

    pub fn shape(&self) -> &[usize] {
        self.components[0].shape()
    }

    pub fn component(&self, id: ModalityId) -> &Tensor {
        &self.components[id.slot(self.modalities())]
    }

    pub fn bias(&self) -> &Tensor {
        &self.components[self.modalities()]
    }

    pub fn components(&self) -> &[Tensor] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Tensor> {
        self.components
    }

    /// Elementwise sum of all components.
    pub fn sum(&self) -> Tensor {
        let mut total = self.components[0].clone();
        for c in &self.components[1..] {
            total.add_assign(c).expect("components share a shape");
        }
        total
    }

    /// Apply the same map to every component.
    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        DecomposedTensor::new(self.components.iter().map(f).collect::<Result<_>>()?)
    }

    /// Componentwise sum of two decompositions.
    pub fn add(&self, other: &DecomposedTensor) -> Result<Self> {
        if self.components.len() != other.components.len() {
            return Err(Error::shape("decomposition add", "component counts differ"));
        }
        DecomposedTensor::new(
            self.components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a.add(b))
                .collect::<Result<_>>()?,
        )
    }
}

/// Where a BatchNorm constant goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnRule {
    /// Entirely into the bias component.
    Identity,
    /// Equal shares `1/(M+1)` to every component.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LnRule {
    /// Each component centered by its own mean, frozen variance, β to bias.
    Ratio,
    Identity,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnStats {
    LiveMean,
    /// Recorded mean and variance used like BatchNorm statistics.
    BnLike,
}

/// Bias reassignment inside activation layers (two-modality models only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActRule {
    None,
    Sum,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub bn_rule: BnRule,
    pub ln_rule: LnRule,
    pub ln_stats: LnStats,
    pub act_rule: ActRule,
    pub epsilon: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            bn_rule: BnRule::Identity,
            ln_rule: LnRule::Ratio,
            ln_stats: LnStats::LiveMean,
            act_rule: ActRule::None,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SplitConfig {
    pub fn new(bn_rule: BnRule, ln_rule: LnRule, act_rule: ActRule) -> Self {
        SplitConfig {
            bn_rule,
            ln_rule,
            ln_stats: match ln_rule {
                LnRule::Ratio => LnStats::LiveMean,
                _ => LnStats::BnLike,
            },
            act_rule,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.ln_rule != LnRule::Ratio && self.ln_stats == LnStats::LiveMean {
            return Err(Error::Config(
                "LayerNorm identity/uniform rules need bn-like stored statistics".into(),
            ));
        }
        if self.act_rule != ActRule::None && modalities != 2 {
            return Err(Error::Config(format!(
                "the {:?} activation rule is defined for exactly two modalities, model has {modalities}",
                self.act_rule
            )));
        }
        Ok(())
    }

    /// Every valid rule combination for a model with `modalities` inputs.
    pub fn all(modalities: usize) -> Vec<SplitConfig> {
        let acts: &[ActRule] = if modalities == 2 {
            &[ActRule::None, ActRule::Sum, ActRule::Ratio]
        } else {
            &[ActRule::None]
        };
        let mut out = Vec::new();
        for bn in [BnRule::Identity, BnRule::Uniform] {
            for ln in [LnRule::Ratio, LnRule::Identity, LnRule::Uniform] {
                for &act in acts {
                    out.push(SplitConfig::new(bn, ln, act));
                }
            }
        }
        out
    }
}

fn bn_name(r: BnRule) -> &'static str {
    match r {
        BnRule::Identity => "identity",
        BnRule::Uniform => "uniform",
    }
}

fn ln_name(r: LnRule) -> &'static str {
    match r {
        LnRule::Ratio => "ratio",
        LnRule::Identity => "identity",
        LnRule::Uniform => "uniform",
    }
}

/// `<bn>-<ln>[-<act>]`, e.g. `identity-ratio` or `uniform-identity-sum`.
impl fmt::Display for SplitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", bn_name(self.bn_rule), ln_name(self.ln_rule))?;
        match self.act_rule {
            ActRule::None => Ok(()),
            ActRule::Sum => write!(f, "-sum"),
            ActRule::Ratio => write!(f, "-ratio"),
        }
    }
}

impl FromStr for SplitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let bad = || Error::Config(format!("unknown variant `{s}` (expected <bn>-<ln>[-<act>])"));
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let bn = match parts[0] {
            "identity" => BnRule::Identity,
            "uniform" => BnRule::Uniform,
            _ => return Err(bad()),
        };
        let ln = match parts[1] {
            "ratio" => LnRule::Ratio,
            "identity" => LnRule::Identity,
            "uniform" => LnRule::Uniform,
            _ => return Err(bad()),
        };
        let act = match parts.get(2) {
            None | Some(&"none") => ActRule::None,
            Some(&"sum") => ActRule::Sum,
            Some(&"ratio") => ActRule::Ratio,
            _ => return Err(bad()),
        };
        Ok(SplitConfig::new(bn, ln, act))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for cfg in SplitConfig::all(2) {
            let back: SplitConfig = cfg.to_string().parse().unwrap();
            assert_eq!(back, cfg);
            cfg.validate(2).unwrap();
        }
        assert_eq!(SplitConfig::all(2).len(), 18);
        assert_eq!(SplitConfig::all(3).len(), 6);
        assert_eq!(SplitConfig::default().to_string(), "identity-ratio");
        assert!("identity".parse::<SplitConfig>().is_err());
        assert!("identity-ratio-max".parse::<SplitConfig>().is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = SplitConfig::new(BnRule::Identity, LnRule::Identity, ActRule::None);
        cfg.ln_stats = LnStats::LiveMean;
        assert!(cfg.validate(2).is_err());
        let sum = SplitConfig::new(BnRule::Identity, LnRule::Ratio, ActRule::Sum);
        assert!(sum.validate(2).is_ok());
        assert!(sum.validate(3).is_err());
        assert!(SplitConfig::default().with_epsilon(0.0).validate(2).is_err());
    }

    #[test]
    fn decomposed_tensor_basics() {
        let d = DecomposedTensor::new(vec![
            Tensor::from_vec(vec![1.0, 2.0]),
            Tensor::from_vec(vec![3.0, 4.0]),
            Tensor::from_vec(vec![0.5, 0.5]),
        ])
        .unwrap();
        assert_eq!(d.modalities(), 2);
        assert_eq!(d.sum().data(), &[4.5, 6.5]);
        assert_eq!(d.component(ModalityId::Bias).data(), &[0.5, 0.5]);
        assert!(DecomposedTensor::new(vec![Tensor::zeros(&[2]), Tensor::zeros(&[3])]).is_err());
    }
}
