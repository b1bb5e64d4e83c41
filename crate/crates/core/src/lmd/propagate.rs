use super::rules;
use super::{DecomposedTensor, LayerCache, RecordedState, SplitConfig};
use crate::error::{Error, Result};
use crate::model::forward::check_inputs;
use crate::model::layers::INSTANCE_AXES;
use crate::model::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

fn cache_err(id: &str, want: &str) -> Error {
    Error::Config(format!("recorded state has no {want} for layer `{id}`"))
}

fn check_state(model: &ModelGraph, state: &RecordedState, cfg: &SplitConfig) -> Result<()> {
    cfg.validate(model.modalities())?;
    if state.epsilon() != cfg.epsilon {
        return Err(Error::Config(format!(
            "state recorded with epsilon {} but config uses {}",
            state.epsilon(),
            cfg.epsilon
        )));
    }
    if state.activations().len() != model.layers().len() {
        return Err(Error::Config("recorded state does not belong to this model".into()));
    }
    Ok(())
}

fn step(
    model: &ModelGraph,
    state: &RecordedState,
    i: usize,
    ins: &[&DecomposedTensor],
    inputs: &[DecomposedTensor],
    cfg: &SplitConfig,
) -> Result<DecomposedTensor> {
    let layer = &model.layers()[i];
    let id = layer.id.as_str();
    match &layer.kind {
        LayerKind::Input { modality, .. } => Ok(inputs[*modality].clone()),
        LayerKind::Dense { weight, bias } => rules::lin_dense(weight, bias, ins[0]),
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => rules::lin_conv2d(weight, bias, *stride, *padding, ins[0]),
        LayerKind::BatchNorm {
            mean,
            var,
            gamma,
            beta,
            eps,
        } => rules::lin_batchnorm(mean, var, gamma, beta, *eps, ins[0], cfg),
        LayerKind::LayerNorm { axes, gamma, beta, eps } => match state.cache(i) {
            LayerCache::Stats(s) => rules::lin_norm(axes, gamma, beta, *eps, s, ins[0], cfg),
            _ => Err(cache_err(id, "normalization statistics")),
        },
        LayerKind::InstanceNorm { gamma, beta, eps } => match state.cache(i) {
            LayerCache::Stats(s) => rules::lin_norm(&INSTANCE_AXES, gamma, beta, *eps, s, ins[0], cfg),
            _ => Err(cache_err(id, "normalization statistics")),
        },
        LayerKind::Relu | LayerKind::Gelu => match state.cache(i) {
            LayerCache::Ratio(c) => rules::lin_activation(c, ins[0], cfg),
            _ => Err(cache_err(id, "chord slopes")),
        },
        LayerKind::Softmax { .. } => match state.cache(i) {
            LayerCache::Ratio(c) => rules::lin_softmax(c, ins[0]),
            _ => Err(cache_err(id, "chord slopes")),
        },
        LayerKind::ConcatFusion { axis } => rules::lin_concat(ins, *axis),
        LayerKind::ResidualAdd => rules::lin_residual_add(ins[0], ins[1]),
        LayerKind::MatMul {
            transpose_a,
            transpose_b,
            out_shape,
        } => rules::lin_matmul(ins[0], ins[1], *transpose_a, *transpose_b, out_shape.as_deref()),
    }
}

fn split_inputs(model: &ModelGraph, inputs: &[Tensor]) -> Result<Vec<DecomposedTensor>> {
    check_inputs(model, inputs)?;
    Ok(rules::split_fusion_inputs(inputs))
}

/// Push the split `inputs` through the network linearized at `state`,
/// returning the decomposition of every layer.
///
/// `inputs` need not be the inputs `state` was recorded on: with a fixed
/// state the linearized network can be evaluated on replaced modalities.
pub fn propagate(
    model: &ModelGraph,
    state: &RecordedState,
    inputs: &[Tensor],
    cfg: &SplitConfig,
) -> Result<Vec<DecomposedTensor>> {
    check_state(model, state, cfg)?;
    let split = split_inputs(model, inputs)?;
    let mut out: Vec<DecomposedTensor> = Vec::with_capacity(model.layers().len());
    for i in 0..model.layers().len() {
        let ins: Vec<&DecomposedTensor> = model.inputs_of(i).iter().map(|&j| &out[j]).collect();
        let d = step(model, state, i, &ins, &split, cfg)?;
        out.push(d);
    }
    Ok(out)
}

/// Like [`propagate`] but keeps only the output decomposition, dropping
/// intermediates after their last consumer.
pub fn propagate_output(
    model: &ModelGraph,
    state: &RecordedState,
    inputs: &[Tensor],
    cfg: &SplitConfig,
) -> Result<DecomposedTensor> {
    check_state(model, state, cfg)?;
    let split = split_inputs(model, inputs)?;
    let n = model.layers().len();
    let target = model.output_index();
    let mut last_use: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for &j in model.inputs_of(i) {
            last_use[j] = last_use[j].max(i);
        }
    }
    let mut live: Vec<Option<DecomposedTensor>> = vec![None; n];
    for i in 0..=target {
        let d = {
            let ins: Vec<&DecomposedTensor> = model
                .inputs_of(i)
                .iter()
                .map(|&j| live[j].as_ref().expect("inputs computed before use"))
                .collect();
            step(model, state, i, &ins, &split, cfg)?
        };
        live[i] = Some(d);
        for &j in model.inputs_of(i) {
            if last_use[j] <= i && j != target {
                live[j] = None;
            }
        }
    }
    Ok(live[target].take().expect("output computed"))
}

/// Record pass plus propagation on the same inputs.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub state: RecordedState,
    pub layers: Vec<DecomposedTensor>,
    output: usize,
}

impl Decomposition {
    pub fn output(&self) -> &DecomposedTensor {
        &self.layers[self.output]
    }

    /// Relative equality residual of every layer.
    pub fn residuals(&self) -> Vec<f64> {
        equality_residuals(&self.state, &self.layers)
    }

    /// Largest residual and the index of the layer where it occurs.
    pub fn max_residual(&self) -> (usize, f64) {
        self.residuals()
            .into_iter()
            .enumerate()
            .fold((0, 0.0), |best, (i, r)| if r > best.1 { (i, r) } else { best })
    }
}

pub fn decompose(model: &ModelGraph, inputs: &[Tensor], cfg: &SplitConfig) -> Result<Decomposition> {
    cfg.validate(model.modalities())?;
    let state = super::record(model, inputs, cfg.epsilon)?;
    let layers = propagate(model, &state, inputs, cfg)?;
    Ok(Decomposition {
        state,
        layers,
        output: model.output_index(),
    })
}

/// `‖Σ_m h_m − F‖∞ / (1 + ‖F‖∞)` per layer.
pub fn equality_residuals(state: &RecordedState, layers: &[DecomposedTensor]) -> Vec<f64> {
    layers
        .iter()
        .zip(state.activations())
        .map(|(d, f)| {
            let diff = d
                .sum()
                .data()
                .iter()
                .zip(f.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            diff / (1.0 + f.max_abs())
        })
        .collect()
}
