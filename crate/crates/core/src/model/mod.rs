//! Fusion-network graphs: layer definitions, validation, the plain forward
//! pass, JSON persistence and a seeded synthetic generator.

pub(crate) mod forward;
mod generate;
mod io;
pub mod layers;
pub mod nested;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Tensor};

pub use forward::{forward, forward_output};
pub use generate::{default_modality_names, gen_sample_set, gen_synthetic_model, ActKind, GenSpec, NormKind, SampleSet};
pub use io::{load_model, load_samples, save_model, save_samples};

/// A modality slot: one of the `M` inputs, or the bias component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityId {
    Modality(usize),
    Bias,
}

impl ModalityId {
    /// Position in an `M + 1` component vector; the bias is last.
    pub fn slot(self, modalities: usize) -> usize {
        match self {
            ModalityId::Modality(m) => m,
            ModalityId::Bias => modalities,
        }
    }

    pub fn from_slot(slot: usize, modalities: usize) -> Self {
        if slot == modalities {
            ModalityId::Bias
        } else {
            ModalityId::Modality(slot)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    Input {
        modality: usize,
        shape: Vec<usize>,
    },
    /// `y = W·x + b` over the leading axis; trailing axes are carried along,
    /// so on `[C, H, W]` inputs this is a pointwise (1×1) projection.
    Dense {
        #[serde(with = "nested")]
        weight: Tensor,
        #[serde(with = "nested")]
        bias: Tensor,
    },
    Conv2d {
        #[serde(with = "nested")]
        weight: Tensor,
        #[serde(with = "nested")]
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    /// Evaluation-mode batch normalization with stored per-channel statistics.
    BatchNorm {
        #[serde(with = "nested")]
        mean: Tensor,
        #[serde(with = "nested")]
        var: Tensor,
        #[serde(with = "nested")]
        gamma: Tensor,
        #[serde(with = "nested")]
        beta: Tensor,
        eps: f64,
    },
    /// Statistics over `axes` of the live input; per-channel (axis 0) affine.
    LayerNorm {
        axes: Vec<usize>,
        #[serde(with = "nested")]
        gamma: Tensor,
        #[serde(with = "nested")]
        beta: Tensor,
        eps: f64,
    },
    /// Per-channel statistics over the spatial axes of a `[C, H, W]` input.
    InstanceNorm {
        #[serde(with = "nested")]
        gamma: Tensor,
        #[serde(with = "nested")]
        beta: Tensor,
        eps: f64,
    },
    #[serde(rename = "ReLU")]
    Relu,
    #[serde(rename = "GELU")]
    Gelu,
    Softmax {
        axis: usize,
    },
    ConcatFusion {
        axis: usize,
    },
    ResidualAdd,
    /// Product of the matrix views of both inputs (leading axis = rows,
    /// remaining axes flattened to columns), optionally transposed, with the
    /// result optionally reshaped.
    MatMul {
        #[serde(default)]
        transpose_a: bool,
        #[serde(default)]
        transpose_b: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out_shape: Option<Vec<usize>>,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::LayerNorm { .. } => "LayerNorm",
            LayerKind::InstanceNorm { .. } => "InstanceNorm",
            LayerKind::Relu => "ReLU",
            LayerKind::Gelu => "GELU",
            LayerKind::Softmax { .. } => "Softmax",
            LayerKind::ConcatFusion { .. } => "ConcatFusion",
            LayerKind::ResidualAdd => "ResidualAdd",
            LayerKind::MatMul { .. } => "MatMul",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            LayerKind::Input { .. } => n == 0,
            LayerKind::ConcatFusion { .. } => n >= 2,
            LayerKind::ResidualAdd | LayerKind::MatMul { .. } => n == 2,
            _ => n == 1,
        }
    }

    fn is_fusion(&self) -> bool {
        matches!(self, LayerKind::ConcatFusion { .. } | LayerKind::MatMul { .. })
    }

    /// True for layers whose map is affine in the input (no norm statistics,
    /// activation or bilinear product).
    pub fn is_affine(&self) -> bool {
        matches!(
            self,
            LayerKind::Input { .. }
                | LayerKind::Dense { .. }
                | LayerKind::Conv2d { .. }
                | LayerKind::ConcatFusion { .. }
                | LayerKind::ResidualAdd
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A validated, topologically ordered layer DAG.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    modality_names: Vec<String>,
    modality_inputs: Vec<String>,
    layers: Vec<LayerSpec>,
    output: String,
    // derived
    index: HashMap<String, usize>,
    input_idx: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    output_idx: usize,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.modality_names == other.modality_names
            && self.modality_inputs == other.modality_inputs
            && self.layers == other.layers
            && self.output == other.output
    }
}

impl ModelGraph {
    /// Build and validate a graph. `modality_inputs[m]` names the Input layer
    /// of modality `m`.
    pub fn new(
        modality_names: Vec<String>,
        modality_inputs: Vec<String>,
        layers: Vec<LayerSpec>,
        output: impl Into<String>,
    ) -> Result<Self> {
        let output = output.into();
        let m = modality_inputs.len();
        if m == 0 {
            return Err(Error::Graph("a model needs at least one modality".into()));
        }
        if modality_names.len() != m {
            return Err(Error::Graph(format!(
                "{} modality names for {m} modalities",
                modality_names.len()
            )));
        }

        let mut index = HashMap::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                return Err(Error::Parse {
                    layer: l.id.clone(),
                    msg: "duplicate layer id".into(),
                });
            }
        }
        for l in &layers {
            for src in &l.inputs {
                if !index.contains_key(src) {
                    return Err(Error::Parse {
                        layer: l.id.clone(),
                        msg: format!("dangling input `{src}`"),
                    });
                }
            }
        }
        if let Some(id) = find_cycle(&layers, &index) {
            return Err(Error::Parse {
                layer: id,
                msg: "layer is part of a cycle".into(),
            });
        }

        let mut input_idx = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if !l.kind.arity_ok(l.inputs.len()) {
                return Err(Error::Parse {
                    layer: l.id.clone(),
                    msg: format!("{} cannot take {} inputs", l.kind.name(), l.inputs.len()),
                });
            }
            let idx: Vec<usize> = l.inputs.iter().map(|s| index[s]).collect();
            if idx.iter().any(|&j| j >= i) {
                return Err(Error::Parse {
                    layer: l.id.clone(),
                    msg: "layers are not in topological order".into(),
                });
            }
            input_idx.push(idx);
        }

        for (mi, id) in modality_inputs.iter().enumerate() {
            match index.get(id).map(|&i| &layers[i].kind) {
                Some(LayerKind::Input { modality, .. }) if *modality == mi => {}
                _ => {
                    return Err(Error::Graph(format!(
                        "modality {mi} maps to `{id}`, which is not an Input layer for that modality"
                    )))
                }
            }
        }
        for l in &layers {
            if let LayerKind::Input { modality, .. } = l.kind {
                if modality >= m || modality_inputs[modality] != l.id {
                    return Err(Error::Parse {
                        layer: l.id.clone(),
                        msg: format!("Input for modality {modality} is not registered"),
                    });
                }
            }
        }

        let output_idx = *index
            .get(&output)
            .ok_or_else(|| Error::Graph(format!("output `{output}` is not a layer")))?;

        let mut graph = ModelGraph {
            modality_names,
            modality_inputs,
            layers,
            output,
            index,
            input_idx,
            shapes: Vec::new(),
            output_idx,
        };
        graph.check_fusion_paths()?;
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn modalities(&self) -> usize {
        self.modality_inputs.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn modality_inputs(&self) -> &[String] {
        &self.modality_inputs
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn output_index(&self) -> usize {
        self.output_idx
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Upstream layer positions of layer `i`.
    pub fn inputs_of(&self, i: usize) -> &[usize] {
        &self.input_idx[i]
    }

    /// Output shape of every layer, in layer order.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn input_shape(&self, modality: usize) -> &[usize] {
        &self.shapes[self.index[&self.modality_inputs[modality]]]
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output_idx]
    }

    /// Short display label per modality: the capitalized initial when the
    /// initials are unambiguous, otherwise the full name.
    pub fn modality_labels(&self) -> Vec<String> {
        modality_labels(&self.modality_names)
    }

    /// Every path from an Input to the output must cross a fusion layer.
    fn check_fusion_paths(&self) -> Result<()> {
        let mut stack = vec![self.output_idx];
        let mut seen = vec![false; self.layers.len()];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            let layer = &self.layers[i];
            if layer.kind.is_fusion() {
                continue;
            }
            if let LayerKind::Input { .. } = layer.kind {
                return Err(Error::Graph(format!(
                    "input `{}` reaches the output without passing a fusion layer",
                    layer.id
                )));
            }
            stack.extend(&self.input_idx[i]);
        }
        Ok(())
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<&Vec<usize>> = self.input_idx[i].iter().map(|&j| &shapes[j]).collect();
            let shape = layer_shape(&layer.kind, &ins).map_err(|msg| Error::Parse {
                layer: layer.id.clone(),
                msg,
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

pub(crate) fn modality_labels(names: &[String]) -> Vec<String> {
    let initials: Vec<String> = names
        .iter()
        .map(|n| n.chars().next().map(|c| c.to_uppercase().collect()).unwrap_or_default())
        .collect();
    let unique = initials
        .iter()
        .enumerate()
        .all(|(i, a)| !a.is_empty() && initials[..i].iter().all(|b| b != a));
    if unique {
        initials
    } else {
        names.to_vec()
    }
}

fn find_cycle(layers: &[LayerSpec], index: &HashMap<String, usize>) -> Option<String> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; layers.len()];
    for start in 0..layers.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(top) = stack.last_mut() {
            let (node, next) = *top;
            if let Some(src) = layers[node].inputs.get(next) {
                top.1 += 1;
                let j = index[src];
                match state[j] {
                    0 => {
                        state[j] = 1;
                        stack.push((j, 0));
                    }
                    1 => return Some(layers[j].id.clone()),
                    _ => {}
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
    }
    None
}

fn per_channel(name: &str, t: &Tensor, channels: usize) -> std::result::Result<(), String> {
    if t.shape() != [channels] {
        return Err(format!("{name} has shape {:?}, expected [{channels}]", t.shape()));
    }
    Ok(())
}

fn layer_shape(kind: &LayerKind, ins: &[&Vec<usize>]) -> std::result::Result<Vec<usize>, String> {
    let first = || ins[0].clone();
    match kind {
        LayerKind::Input { shape, .. } => {
            if shape.is_empty() || shape.contains(&0) {
                return Err(format!("input shape {shape:?} must have positive extents"));
            }
            Ok(shape.clone())
        }
        LayerKind::Dense { weight, bias } => {
            let x = first();
            if weight.ndim() != 2 || weight.shape()[1] != x[0] {
                return Err(format!("weight {:?} does not accept input {x:?}", weight.shape()));
            }
            per_channel("bias", bias, weight.shape()[0])?;
            let mut out = x;
            out[0] = weight.shape()[0];
            Ok(out)
        }
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let x = first();
            if x.len() != 3 || weight.ndim() != 4 || weight.shape()[1] != x[0] {
                return Err(format!("kernel {:?} does not accept input {x:?}", weight.shape()));
            }
            per_channel("bias", bias, weight.shape()[0])?;
            let oh = conv_out_extent(x[1], weight.shape()[2], *stride, *padding).map_err(|e| e.to_string())?;
            let ow = conv_out_extent(x[2], weight.shape()[3], *stride, *padding).map_err(|e| e.to_string())?;
            Ok(vec![weight.shape()[0], oh, ow])
        }
        LayerKind::BatchNorm {
            mean,
            var,
            gamma,
            beta,
            eps,
        } => {
            let x = first();
            for (n, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
                per_channel(n, t, x[0])?;
            }
            if var.data().iter().any(|v| v + eps <= 0.0) {
                return Err("variance plus eps must be positive".into());
            }
            Ok(x)
        }
        LayerKind::LayerNorm { axes, gamma, beta, eps } => {
            let x = first();
            if axes.is_empty() || axes.iter().enumerate().any(|(i, &a)| a >= x.len() || axes[..i].contains(&a)) {
                return Err(format!("bad normalization axes {axes:?} for input {x:?}"));
            }
            per_channel("gamma", gamma, x[0])?;
            per_channel("beta", beta, x[0])?;
            if *eps < 0.0 {
                return Err("eps must be non-negative".into());
            }
            Ok(x)
        }
        LayerKind::InstanceNorm { gamma, beta, eps } => {
            let x = first();
            if x.len() != 3 {
                return Err(format!("InstanceNorm expects [C, H, W], got {x:?}"));
            }
            per_channel("gamma", gamma, x[0])?;
            per_channel("beta", beta, x[0])?;
            if *eps < 0.0 {
                return Err("eps must be non-negative".into());
            }
            Ok(x)
        }
        LayerKind::Relu | LayerKind::Gelu => Ok(first()),
        LayerKind::Softmax { axis } => {
            let x = first();
            if *axis >= x.len() {
                return Err(format!("softmax axis {axis} out of range for {x:?}"));
            }
            Ok(x)
        }
        LayerKind::ConcatFusion { axis } => {
            let x = first();
            if *axis >= x.len() {
                return Err(format!("concat axis {axis} out of range for {x:?}"));
            }
            let mut out = x.clone();
            out[*axis] = 0;
            for s in ins {
                let ok = s.len() == x.len() && s.iter().zip(&x).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(format!("cannot concatenate {s:?} with {x:?} along axis {axis}"));
                }
                out[*axis] += s[*axis];
            }
            Ok(out)
        }
        LayerKind::ResidualAdd => {
            if ins[0] != ins[1] {
                return Err(format!("residual operands differ: {:?} vs {:?}", ins[0], ins[1]));
            }
            Ok(first())
        }
        LayerKind::MatMul {
            transpose_a,
            transpose_b,
            out_shape,
        } => {
            let view = |s: &Vec<usize>, t: bool| {
                let (r, c) = (s[0], s[1..].iter().product::<usize>());
                if t {
                    (c, r)
                } else {
                    (r, c)
                }
            };
            let (m, k) = view(ins[0], *transpose_a);
            let (k2, n) = view(ins[1], *transpose_b);
            if k != k2 {
                return Err(format!("inner extents differ: {m}x{k} times {k2}x{n}"));
            }
            match out_shape {
                Some(s) if s.iter().product::<usize>() != m * n || s.contains(&0) => {
                    Err(format!("out_shape {s:?} does not hold a {m}x{n} product"))
                }
                Some(s) => Ok(s.clone()),
                None => Ok(vec![m, n]),
            }
        }
    }
}
