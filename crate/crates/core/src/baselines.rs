//! Modality-level Shapley attribution and the LMD + SHAP hybrid.
//!
//! A coalition keeps the modalities in it and replaces every other input
//! with zeros, the same reference point the decomposition uses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmd::{decompose, SplitConfig};
use crate::metrics::{replacement_protocol, MetricConfig, SeparationReport};
use crate::model::{forward_output, ModelGraph, SampleSet};
use crate::tensor::Tensor;

/// Largest modality count accepted for coalition enumeration.
pub const MAX_MODALITIES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// One output-shaped map per modality.
    pub attributions: Vec<Tensor>,
    /// Value of the empty coalition (or the hybrid's leftover).
    pub base: Tensor,
    /// Coalitions evaluated.
    pub evaluations: usize,
}

impl Attribution {
    /// `base + Σ_m φ_m`.
    pub fn total(&self) -> Tensor {
        let mut t = self.base.clone();
        for a in &self.attributions {
            t.add_assign(a).expect("attributions share the output shape");
        }
        t
    }

    /// `‖base + Σφ − target‖∞ / (1 + ‖target‖∞)`.
    pub fn efficiency_residual(&self, target: &Tensor) -> f64 {
        let diff = self
            .total()
            .data()
            .iter()
            .zip(target.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        diff / (1.0 + target.max_abs())
    }
}

fn check_guard(m: usize) -> Result<()> {
    if m > MAX_MODALITIES {
        return Err(Error::Config(format!(
            "coalition enumeration is limited to {MAX_MODALITIES} modalities, model has {m}"
        )));
    }
    Ok(())
}

fn masked(inputs: &[Tensor], mask: usize) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if mask & (1 << i) != 0 {
                x.clone()
            } else {
                Tensor::zeros(x.shape())
            }
        })
        .collect()
}

/// `|S|!(M−|S|−1)!/M!` for every coalition size.
fn shapley_weights(m: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=m)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect()
}

/// Shapley values of a game given by its value on every coalition bitmask.
pub fn shapley_values(values: &[Tensor], m: usize) -> Result<Vec<Tensor>> {
    if values.len() != 1 << m {
        return Err(Error::Config(format!("{} coalition values for {m} players", values.len())));
    }
    let w = shapley_weights(m);
    let shape = values[0].shape().to_vec();
    (0..m)
        .map(|player| {
            let bit = 1 << player;
            let mut phi = Tensor::zeros(&shape);
            for s in (0..values.len()).filter(|s| s & bit == 0) {
                let weight = w[(s as u32).count_ones() as usize];
                let gain = values[s | bit].sub(&values[s])?;
                phi.add_assign(&gain.scale(weight))?;
            }
            Ok(phi)
        })
        .collect()
}

fn coalition_values<F>(m: usize, f: F) -> Result<Vec<Tensor>>
where
    F: Fn(usize) -> Result<Tensor> + Sync,
{
    (0..1usize << m).into_par_iter().map(&f).collect()
}

/// Exact Shapley attribution of the original model over its modalities.
pub fn shapley(model: &ModelGraph, inputs: &[Tensor]) -> Result<Attribution> {
    let m = model.modalities();
    check_guard(m)?;
    let values = coalition_values(m, |mask| forward_output(model, &masked(inputs, mask)))?;
    let attributions = shapley_values(&values, m)?;
    Ok(Attribution {
        attributions,
        base: values[0].clone(),
        evaluations: values.len(),
    })
}

/// How the hybrid hands the bias component back to the modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Redistribution {
    /// Shapley shares of the bias component over coalitions: the bias of
    /// the decomposition of each masked input is the coalition value.
    #[default]
    Shapley,
    /// Elementwise, in proportion to `|h_m|`.
    Proportional,
}

/// LMD components with the bias component redistributed onto the
/// modalities; `base` keeps whatever is not attributed.
pub fn lmd_shap(
    model: &ModelGraph,
    inputs: &[Tensor],
    cfg: &SplitConfig,
    mode: Redistribution,
) -> Result<Attribution> {
    let m = model.modalities();
    check_guard(m)?;
    let full = decompose(model, inputs, cfg)?;
    let out = full.output();
    let h: Vec<Tensor> = out.components()[..m].to_vec();
    let hb = out.bias().clone();
    match mode {
        Redistribution::Shapley => {
            let full_mask = (1usize << m) - 1;
            let values = coalition_values(m, |mask| {
                if mask == full_mask {
                    return Ok(hb.clone());
                }
                Ok(decompose(model, &masked(inputs, mask), cfg)?.output().bias().clone())
            })?;
            let shares = shapley_values(&values, m)?;
            let mut base = hb;
            let attributions = h
                .iter()
                .zip(&shares)
                .map(|(hm, s)| {
                    base = base.sub(s)?;
                    hm.add(s)
                })
                .collect::<Result<_>>()?;
            Ok(Attribution {
                attributions,
                base,
                evaluations: values.len(),
            })
        }
        Redistribution::Proportional => {
            let n = hb.len();
            let mut attributions: Vec<Tensor> = h.clone();
            let mut base = hb.clone();
            for j in 0..n {
                let total: f64 = h.iter().map(|t| t.data()[j].abs()).sum();
                if total == 0.0 {
                    continue;
                }
                let b = hb.data()[j];
                let mut given = 0.0;
                for (a, hm) in attributions.iter_mut().zip(&h) {
                    let share = b * hm.data()[j].abs() / total;
                    a.data_mut()[j] += share;
                    given += share;
                }
                base.data_mut()[j] = b - given;
            }
            Ok(Attribution {
                attributions,
                base,
                evaluations: 1,
            })
        }
    }
}

/// Attribution method scored by [`attribution_protocol`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Shapley,
    LmdShap(SplitConfig, Redistribution),
}

/// Replacement protocol for attribution baselines. Every (clean or
/// perturbed) input is attributed from scratch.
pub fn attribution_protocol(
    model: &ModelGraph,
    samples: &SampleSet,
    method: Method,
    mcfg: &MetricConfig,
) -> Result<SeparationReport> {
    samples.check_against(model)?;
    let offsets = mcfg.offset_list(samples.len())?;
    let sets = mcfg.perturb_sets(model.modalities())?;
    let name = match method {
        Method::Shapley => "shapley".to_string(),
        Method::LmdShap(cfg, Redistribution::Shapley) => format!("lmd-shap:{cfg}"),
        Method::LmdShap(cfg, Redistribution::Proportional) => format!("lmd-shap-proportional:{cfg}"),
    };
    replacement_protocol(
        samples,
        &model.modality_labels(),
        &sets,
        &offsets,
        mcfg.positive_part,
        name,
        |_clean: &[Tensor]| {
            Ok(move |inputs: &[Tensor]| {
                let a = match method {
                    Method::Shapley => shapley(model, inputs)?,
                    Method::LmdShap(cfg, mode) => lmd_shap(model, inputs, &cfg, mode)?,
                };
                Ok(a.attributions)
            })
        },
    )
}
