use crate::error::{Error, Result};
use crate::model::forward::{check_inputs, eval_layer};
use crate::model::layers::{self, INSTANCE_AXES};
use crate::model::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

/// Chord slopes `c = F/(A + ε)` of an activation-like layer, plus the
/// per-neuron residual `F − c·A` that the bias component absorbs so the
/// linearized layer reproduces `F` exactly at the recorded input.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCache {
    pub ratio: Tensor,
    pub residual: Tensor,
    /// Neurons whose slope was clamped to zero.
    pub clamped: Vec<usize>,
}

/// Statistics of the recorded normalization input, group-shaped (reduced
/// axes kept with extent 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    /// Affine layers and BatchNorm need nothing beyond their parameters.
    None,
    Ratio(RatioCache),
    Stats(NormStats),
}

/// Everything the linearized network needs from the record pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedState {
    epsilon: f64,
    activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
}

impl RecordedState {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Recorded activation `F^l` of every layer, in layer order.
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn activation(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn cache(&self, layer: usize) -> &LayerCache {
        &self.caches[layer]
    }
}

/// Slope, residual and clamp flag for one neuron with pre-activation `pre`
/// and output `post`.
///
/// When the denominator is near zero (`|pre| ≤ 10ε`) and the slope would
/// overshoot (`|post| > 10ε`, or `|c·pre| > |post|·(1 + 1e-6)`, or `c` is not
/// finite) the slope is clamped to 0 and the whole output becomes residual.
pub fn chord_ratio(pre: f64, post: f64, eps: f64) -> (f64, f64, bool) {
    let c = post / (pre + eps);
    let near = pre.abs() <= 10.0 * eps;
    let clamp = !c.is_finite()
        || (near && (post.abs() > 10.0 * eps || (c * pre).abs() > post.abs() * (1.0 + 1e-6)));
    if clamp {
        (0.0, post, true)
    } else {
        (c, post - c * pre, false)
    }
}

fn ratio_cache(pre: &Tensor, post: &Tensor, eps: f64) -> RatioCache {
    let n = pre.len();
    let mut ratio = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    let mut clamped = Vec::new();
    for (j, (&a, &f)) in pre.data().iter().zip(post.data()).enumerate() {
        let (c, r, cl) = chord_ratio(a, f, eps);
        ratio.push(c);
        residual.push(r);
        if cl {
            clamped.push(j);
        }
    }
    RatioCache {
        ratio: Tensor::new(pre.shape().to_vec(), ratio).expect("shape preserved"),
        residual: Tensor::new(pre.shape().to_vec(), residual).expect("shape preserved"),
        clamped,
    }
}

/// One plain forward pass on the full multimodal input, caching chord slopes
/// and normalization statistics.
pub fn record(model: &ModelGraph, inputs: &[Tensor], epsilon: f64) -> Result<RecordedState> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    check_inputs(model, inputs)?;
    let n = model.layers().len();
    let mut activations: Vec<Tensor> = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for (i, layer) in model.layers().iter().enumerate() {
        let ins: Vec<&Tensor> = model.inputs_of(i).iter().map(|&j| &activations[j]).collect();
        let (y, cache) = match &layer.kind {
            LayerKind::Input { modality, .. } => (inputs[*modality].clone(), LayerCache::None),
            LayerKind::Relu | LayerKind::Gelu | LayerKind::Softmax { .. } => {
                let y = eval_layer(&layer.kind, &ins)?;
                let cache = ratio_cache(ins[0], &y, epsilon);
                (y, LayerCache::Ratio(cache))
            }
            LayerKind::LayerNorm { axes, gamma, beta, eps } => {
                let (y, mean, var) = layers::normalize(ins[0], axes, gamma, beta, *eps)?;
                (y, LayerCache::Stats(NormStats { mean, var }))
            }
            LayerKind::InstanceNorm { gamma, beta, eps } => {
                let (y, mean, var) = layers::normalize(ins[0], &INSTANCE_AXES, gamma, beta, *eps)?;
                (y, LayerCache::Stats(NormStats { mean, var }))
            }
            kind => (eval_layer(kind, &ins)?, LayerCache::None),
        };
        if !y.all_finite() {
            return Err(Error::NonFinite(layer.id.clone()));
        }
        activations.push(y);
        caches.push(cache);
    }
    Ok(RecordedState {
        epsilon,
        activations,
        caches,
    })
}
