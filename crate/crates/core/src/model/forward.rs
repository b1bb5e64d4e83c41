use super::layers::{self, INSTANCE_AXES};
use super::{LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{concat, conv2d, Tensor};

/// Evaluate one layer on its already computed inputs.
pub(crate) fn eval_layer(kind: &LayerKind, ins: &[&Tensor]) -> Result<Tensor> {
    Ok(match kind {
        LayerKind::Input { .. } => unreachable!("inputs are bound, not evaluated"),
        LayerKind::Dense { weight, bias } => layers::dense(ins[0], weight, Some(bias))?,
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => conv2d(ins[0], weight, Some(bias), *stride, *padding)?,
        LayerKind::BatchNorm {
            mean,
            var,
            gamma,
            beta,
            eps,
        } => layers::batchnorm(ins[0], mean, var, gamma, beta, *eps),
        LayerKind::LayerNorm { axes, gamma, beta, eps } => layers::normalize(ins[0], axes, gamma, beta, *eps)?.0,
        LayerKind::InstanceNorm { gamma, beta, eps } => {
            layers::normalize(ins[0], &INSTANCE_AXES, gamma, beta, *eps)?.0
        }
        LayerKind::Relu => layers::relu(ins[0]),
        LayerKind::Gelu => layers::gelu(ins[0]),
        LayerKind::Softmax { axis } => layers::softmax(ins[0], *axis),
        LayerKind::ConcatFusion { axis } => concat(ins, *axis)?,
        LayerKind::ResidualAdd => ins[0].add(ins[1])?,
        LayerKind::MatMul {
            transpose_a,
            transpose_b,
            out_shape,
        } => layers::matmul_layer(ins[0], ins[1], *transpose_a, *transpose_b, out_shape.as_deref())?,
    })
}

pub(crate) fn check_inputs(model: &ModelGraph, inputs: &[Tensor]) -> Result<()> {
    if inputs.len() < model.modalities() {
        return Err(Error::MissingInput(inputs.len()));
    }
    if inputs.len() > model.modalities() {
        return Err(Error::shape(
            "forward",
            format!("{} inputs for {} modalities", inputs.len(), model.modalities()),
        ));
    }
    for (m, x) in inputs.iter().enumerate() {
        let want = model.input_shape(m);
        if x.shape() != want {
            return Err(Error::shape(
                "forward",
                format!("modality {m} input {:?}, expected {want:?}", x.shape()),
            ));
        }
    }
    Ok(())
}

/// Every layer's activation, in layer order. `inputs[m]` feeds modality `m`.
pub fn forward(model: &ModelGraph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    check_inputs(model, inputs)?;
    let mut acts: Vec<Tensor> = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let y = match &layer.kind {
            LayerKind::Input { modality, .. } => inputs[*modality].clone(),
            kind => {
                let ins: Vec<&Tensor> = model.inputs_of(i).iter().map(|&j| &acts[j]).collect();
                eval_layer(kind, &ins)?
            }
        };
        acts.push(y);
    }
    Ok(acts)
}

/// The model prediction only.
pub fn forward_output(model: &ModelGraph, inputs: &[Tensor]) -> Result<Tensor> {
    let mut acts = forward(model, inputs)?;
    Ok(acts.swap_remove(model.output_index()))
}
