//! Seeded synthetic fusion models and input sets.
//!
//! A generated model has `M` input branches, each `Conv2d → BatchNorm → ReLU`,
//! a channel concatenation, a trunk of `depth` blocks
//! `(Conv2d | Dense) → norm → activation` (conv on even blocks, pointwise
//! dense on odd ones), one `ResidualAdd` joining the last block output with
//! the first block's linear output, an optional single-head attention block,
//! and a 1×1 convolution head with one output channel.
//!
//! With `norms` or `activations` empty the corresponding layers are omitted
//! everywhere, which yields purely affine models. The layer count is
//!
//! ```text
//! M·(2 + n + a) + 1 + depth·(1 + n + a) + 1 + 6·attention + 1
//! ```
//!
//! where `n` and `a` are 1 when norms / activations are enabled and 0
//! otherwise (14 for `M = 2`, `depth = 1`, no attention).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
    InstanceNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActKind {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub modalities: usize,
    pub in_channels: usize,
    /// Spatial grid (height, width) of every modality input.
    pub grid: (usize, usize),
    pub branch_channels: usize,
    pub trunk_channels: usize,
    pub depth: usize,
    /// Cycled through the trunk blocks; empty disables normalization.
    pub norms: Vec<NormKind>,
    /// Cycled through the trunk blocks; empty disables activations.
    pub activations: Vec<ActKind>,
    pub include_attention: bool,
    pub attention_dim: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            modalities: 2,
            in_channels: 3,
            grid: (32, 32),
            branch_channels: 4,
            trunk_channels: 8,
            depth: 3,
            norms: vec![NormKind::BatchNorm, NormKind::LayerNorm, NormKind::InstanceNorm],
            activations: vec![ActKind::Relu, ActKind::Gelu],
            include_attention: false,
            attention_dim: 4,
        }
    }
}

impl GenSpec {
    /// Number of layers [`gen_synthetic_model`] produces for this spec.
    pub fn layer_count(&self) -> usize {
        let n = usize::from(!self.norms.is_empty());
        let a = usize::from(!self.activations.is_empty());
        self.modalities * (2 + n + a) + 1 + self.depth * (1 + n + a) + 1 + 6 * usize::from(self.include_attention) + 1
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("modalities", self.modalities),
            ("in_channels", self.in_channels),
            ("grid height", self.grid.0),
            ("grid width", self.grid.1),
            ("branch_channels", self.branch_channels),
            ("trunk_channels", self.trunk_channels),
            ("depth", self.depth),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

pub fn default_modality_names(m: usize) -> Vec<String> {
    const KNOWN: [&str; 3] = ["camera", "radar", "lidar"];
    (0..m)
        .map(|i| KNOWN.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("sensor{i}")))
        .collect()
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    fn push(&mut self, id: String, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec::new(id.clone(), kind, inputs));
        id
    }

    fn conv(&mut self, id: String, input: &str, cin: usize, cout: usize, k: usize) -> String {
        let a = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = self.uniform(&[cout, cin, k, k], -a, a);
        let bias = self.uniform(&[cout], -a, a);
        let kind = LayerKind::Conv2d {
            weight,
            bias,
            stride: 1,
            padding: k / 2,
        };
        self.push(id, kind, &[input])
    }

    fn dense(&mut self, id: String, input: &str, cin: usize, cout: usize, gain: f64, with_bias: bool) -> String {
        let a = 1.0 / (cin as f64).sqrt();
        let weight = self.uniform(&[cout, cin], -a, a).scale(gain);
        let bias = if with_bias {
            self.uniform(&[cout], -a, a)
        } else {
            Tensor::zeros(&[cout])
        };
        self.push(id, LayerKind::Dense { weight, bias }, &[input])
    }

    fn norm(&mut self, id: String, input: &str, kind: NormKind, c: usize) -> String {
        let gamma = self.uniform(&[c], 0.8, 1.2);
        let beta = self.uniform(&[c], -0.2, 0.2);
        let eps = 1e-5;
        let kind = match kind {
            NormKind::BatchNorm => LayerKind::BatchNorm {
                mean: self.uniform(&[c], -0.3, 0.3),
                var: self.uniform(&[c], 0.5, 1.5),
                gamma,
                beta,
                eps,
            },
            NormKind::LayerNorm => LayerKind::LayerNorm {
                axes: vec![0],
                gamma,
                beta,
                eps,
            },
            NormKind::InstanceNorm => LayerKind::InstanceNorm { gamma, beta, eps },
        };
        self.push(id, kind, &[input])
    }

    fn act(&mut self, id: String, input: &str, kind: ActKind) -> String {
        let kind = match kind {
            ActKind::Relu => LayerKind::Relu,
            ActKind::Gelu => LayerKind::Gelu,
        };
        self.push(id, kind, &[input])
    }
}

fn norm_tag(kind: NormKind) -> &'static str {
    match kind {
        NormKind::BatchNorm => "bn",
        NormKind::LayerNorm => "ln",
        NormKind::InstanceNorm => "in",
    }
}

/// Deterministic model for `seed` and `spec`; layout described at module level.
pub fn gen_synthetic_model(seed: u64, spec: &GenSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::with_capacity(spec.layer_count()),
    };
    let names = default_modality_names(spec.modalities);
    let (h, w) = spec.grid;

    let mut inputs = Vec::new();
    let mut branch_outs = Vec::new();
    for (m, name) in names.iter().enumerate() {
        let input = b.push(
            format!("in_{name}"),
            LayerKind::Input {
                modality: m,
                shape: vec![spec.in_channels, h, w],
            },
            &[],
        );
        let mut x = b.conv(format!("{name}_conv"), &input, spec.in_channels, spec.branch_channels, 3);
        if !spec.norms.is_empty() {
            x = b.norm(format!("{name}_bn"), &x, NormKind::BatchNorm, spec.branch_channels);
        }
        if !spec.activations.is_empty() {
            x = b.act(format!("{name}_relu"), &x, ActKind::Relu);
        }
        inputs.push(input);
        branch_outs.push(x);
    }
    let refs: Vec<&str> = branch_outs.iter().map(String::as_str).collect();
    let mut x = b.push("fusion".into(), LayerKind::ConcatFusion { axis: 0 }, &refs);

    let mut cin = spec.modalities * spec.branch_channels;
    let c = spec.trunk_channels;
    let mut skip = None;
    for i in 0..spec.depth {
        x = if i % 2 == 0 {
            b.conv(format!("block{i}_conv"), &x, cin, c, 3)
        } else {
            b.dense(format!("block{i}_dense"), &x, cin, c, 1.0, true)
        };
        skip.get_or_insert_with(|| x.clone());
        if !spec.norms.is_empty() {
            let kind = spec.norms[i % spec.norms.len()];
            x = b.norm(format!("block{i}_{}", norm_tag(kind)), &x, kind, c);
        }
        if !spec.activations.is_empty() {
            let kind = spec.activations[i % spec.activations.len()];
            let tag = match kind {
                ActKind::Relu => "relu",
                ActKind::Gelu => "gelu",
            };
            x = b.act(format!("block{i}_{tag}"), &x, kind);
        }
        cin = c;
    }
    let skip = skip.expect("depth >= 1");
    x = b.push("residual".into(), LayerKind::ResidualAdd, &[&x, &skip]);

    if spec.include_attention {
        let d = spec.attention_dim;
        let q = b.dense("attn_q".into(), &x, c, d, 1.0 / (d as f64).sqrt(), false);
        let k = b.dense("attn_k".into(), &x, c, d, 1.0, false);
        let v = b.dense("attn_v".into(), &x, c, c, 1.0, true);
        let scores = b.push(
            "attn_scores".into(),
            LayerKind::MatMul {
                transpose_a: true,
                transpose_b: false,
                out_shape: None,
            },
            &[&q, &k],
        );
        let attn = b.push("attn_softmax".into(), LayerKind::Softmax { axis: 1 }, &[&scores]);
        x = b.push(
            "attn_out".into(),
            LayerKind::MatMul {
                transpose_a: false,
                transpose_b: true,
                out_shape: Some(vec![c, h, w]),
            },
            &[&v, &attn],
        );
    }

    let head = b.conv("head".into(), &x, c, 1, 1);
    ModelGraph::new(names, inputs, b.layers, head)
}

/// Per-modality inputs for `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    modality_names: Vec<String>,
    samples: Vec<Vec<Tensor>>,
}

impl SampleSet {
    pub fn new(modality_names: Vec<String>, samples: Vec<Vec<Tensor>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            for (k, s) in samples.iter().enumerate() {
                if s.len() != modality_names.len() {
                    return Err(Error::Document(format!(
                        "sample {k} has {} modalities, expected {}",
                        s.len(),
                        modality_names.len()
                    )));
                }
                for (m, t) in s.iter().enumerate() {
                    if t.shape() != first[m].shape() {
                        return Err(Error::Document(format!(
                            "sample {k} modality {m} has shape {:?}, expected {:?}",
                            t.shape(),
                            first[m].shape()
                        )));
                    }
                }
            }
        }
        Ok(SampleSet { modality_names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn sample(&self, k: usize) -> &[Tensor] {
        &self.samples[k]
    }

    pub fn samples(&self) -> &[Vec<Tensor>] {
        &self.samples
    }

    /// Check that every sample fits `model`'s inputs.
    pub fn check_against(&self, model: &ModelGraph) -> Result<()> {
        if self.modality_names.len() != model.modalities() {
            return Err(Error::Config(format!(
                "sample set has {} modalities, model has {}",
                self.modality_names.len(),
                model.modalities()
            )));
        }
        if let Some(first) = self.samples.first() {
            for (m, t) in first.iter().enumerate() {
                if t.shape() != model.input_shape(m) {
                    return Err(Error::Config(format!(
                        "modality {m} samples have shape {:?}, model expects {:?}",
                        t.shape(),
                        model.input_shape(m)
                    )));
                }
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sum of a few random-sign Gaussian blobs per channel.
fn blob_field(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    if shape.len() != 3 {
        let n: usize = shape.iter().product();
        return Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("consistent shape");
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let max_sigma = (h.min(w) as f64 / 5.0).max(1.5);
    let mut data = vec![0.0; c * h * w];
    for plane in data.chunks_mut(h * w) {
        for _ in 0..4 {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(1.0..=max_sigma);
            let amp = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let inv = 1.0 / (2.0 * sigma * sigma);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    plane[y * w + x] += amp * (-d2 * inv).exp();
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `n` deterministic samples shaped for `model`; sample `k` of modality `m`
/// depends only on `(seed, k, m)`.
pub fn gen_sample_set(seed: u64, model: &ModelGraph, n: usize) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mm = model.modalities();
    let samples = (0..n)
        .map(|k| {
            (0..mm)
                .map(|m| {
                    let s = splitmix(splitmix(splitmix(seed) ^ k as u64) ^ m as u64);
                    blob_field(&mut ChaCha8Rng::seed_from_u64(s), model.input_shape(m))
                })
                .collect()
        })
        .collect();
    SampleSet::new(model.modality_names().to_vec(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::save_model;

    fn pearson_raw(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn layer_count_formula() {
        let spec = GenSpec {
            depth: 1,
            ..GenSpec::default()
        };
        assert_eq!(spec.layer_count(), 14);
        for spec in [
            spec.clone(),
            GenSpec::default(),
            GenSpec {
                modalities: 3,
                include_attention: true,
                grid: (4, 4),
                ..GenSpec::default()
            },
            GenSpec {
                norms: vec![],
                activations: vec![],
                depth: 2,
                grid: (4, 4),
                ..GenSpec::default()
            },
        ] {
            let m = gen_synthetic_model(1, &spec).unwrap();
            assert_eq!(m.layers().len(), spec.layer_count());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = save_model(&gen_synthetic_model(3, &GenSpec::default()).unwrap());
        let b = save_model(&gen_synthetic_model(3, &GenSpec::default()).unwrap());
        let c = save_model(&gen_synthetic_model(4, &GenSpec::default()).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_zero_depth() {
        let spec = GenSpec {
            depth: 0,
            ..GenSpec::default()
        };
        assert!(gen_synthetic_model(0, &spec).is_err());
    }

    #[test]
    fn samples_deterministic_and_decorrelated() {
        let m = gen_synthetic_model(7, &GenSpec::default()).unwrap();
        let a = gen_sample_set(7, &m, 40).unwrap();
        let b = gen_sample_set(7, &m, 40).unwrap();
        assert_eq!(a, b);
        assert!(gen_sample_set(7, &m, 0).is_err());

        let n = a.len();
        let mut total = 0.0;
        for k in 0..20 {
            let j = (k + n / 2) % n;
            for mm in 0..2 {
                total += pearson_raw(a.sample(k)[mm].data(), a.sample(j)[mm].data());
            }
        }
        let mean = total / 40.0;
        assert!(mean.abs() < 0.2, "mean pearson {mean}");
    }
}
