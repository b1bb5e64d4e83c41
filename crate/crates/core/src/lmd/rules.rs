//! Linearized layer rules acting on decomposed tensors.
//!
//! Every rule preserves the per-neuron total: the components of the output
//! sum to the linearized layer applied to the summed input. Rules that
//! introduce constants (layer biases, normalization shifts, chord residuals)
//! route them into components according to the [`SplitConfig`].

use super::{ActRule, BnRule, DecomposedTensor, LnRule, LnStats, NormStats, RatioCache, SplitConfig};
use crate::error::{Error, Result};
use crate::model::layers::{self, channel_affine, channel_of, matrix_view};
use crate::tensor::{self, concat, conv2d, group_index, Tensor};

/// The Input layer of modality `m` carries `x_m` in component `m` and zeros
/// everywhere else, including the bias.
pub fn split_fusion_inputs(inputs: &[Tensor]) -> Vec<DecomposedTensor> {
    let m = inputs.len();
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut components = vec![Tensor::zeros(x.shape()); m + 1];
            components[i] = x.clone();
            DecomposedTensor { components }
        })
        .collect()
}

/// Dense layer: modality components get `W·h`, the bias component gets
/// `W·h_b + b`.
pub fn lin_dense(weight: &Tensor, bias: &Tensor, d: &DecomposedTensor) -> Result<DecomposedTensor> {
    let last = d.modalities();
    let components = d
        .components()
        .iter()
        .enumerate()
        .map(|(i, h)| layers::dense(h, weight, (i == last).then_some(bias)))
        .collect::<Result<_>>()?;
    DecomposedTensor::new(components)
}

pub fn lin_conv2d(
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    d: &DecomposedTensor,
) -> Result<DecomposedTensor> {
    let last = d.modalities();
    let components = d
        .components()
        .iter()
        .enumerate()
        .map(|(i, h)| conv2d(h, weight, (i == last).then_some(bias), stride, padding))
        .collect::<Result<_>>()?;
    DecomposedTensor::new(components)
}

pub fn lin_concat(parts: &[&DecomposedTensor], axis: usize) -> Result<DecomposedTensor> {
    let k = parts[0].components().len();
    if parts.iter().any(|p| p.components().len() != k) {
        return Err(Error::shape("concat", "component counts differ"));
    }
    let components = (0..k)
        .map(|slot| {
            let slices: Vec<&Tensor> = parts.iter().map(|p| &p.components()[slot]).collect();
            concat(&slices, axis)
        })
        .collect::<Result<_>>()?;
    DecomposedTensor::new(components)
}

pub fn lin_residual_add(a: &DecomposedTensor, b: &DecomposedTensor) -> Result<DecomposedTensor> {
    a.add(b)
}

/// Activation layer with recorded chord slopes.
///
/// `ActRule::None` scales every component by `c` and adds the chord residual
/// to the bias. `Sum` and `Ratio` (two modalities only) first move the bias
/// entry into the modality components at neurons matching their sign
/// patterns, leaving the bias entry at exactly zero there; the residual
/// follows the bias mass.
pub fn lin_activation(cache: &RatioCache, d: &DecomposedTensor, cfg: &SplitConfig) -> Result<DecomposedTensor> {
    check_same(cache.ratio.shape(), d.shape(), "activation")?;
    if cfg.act_rule == ActRule::None {
        return Ok(scale_with_residual(cache, d));
    }
    if d.modalities() != 2 {
        return Err(Error::Config(format!(
            "the {:?} activation rule needs exactly two modalities, got {}",
            cfg.act_rule,
            d.modalities()
        )));
    }
    let c = cache.ratio.data();
    let res = cache.residual.data();
    let [hc, hr, hb] = [0, 1, 2].map(|i| d.components()[i].data());
    let n = c.len();
    let (mut oc, mut or, mut ob) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let (x, y, b, cj, rj) = (hc[j], hr[j], hb[j], c[j], res[j]);
        // share of the bias (and residual) given to the camera / radar slot
        let split = match cfg.act_rule {
            ActRule::Sum => {
                let cam = (x < 0.0 && y > 0.0 && b < 0.0) || (x > 0.0 && y < 0.0 && b > 0.0);
                let rad = (x < 0.0 && y > 0.0 && b > 0.0) || (x > 0.0 && y < 0.0 && b < 0.0);
                if cam {
                    Some((1.0, 0.0))
                } else if rad {
                    Some((0.0, 1.0))
                } else {
                    None
                }
            }
            ActRule::Ratio => {
                let same = (x > 0.0 && y > 0.0 && b > 0.0) || (x < 0.0 && y < 0.0 && b < 0.0);
                let opposite = (x > 0.0 && y > 0.0 && b < 0.0) || (x < 0.0 && y < 0.0 && b > 0.0);
                let alpha = y.abs() / (x.abs() + y.abs() + cfg.epsilon);
                if same {
                    Some((1.0 - alpha, alpha))
                } else if opposite {
                    Some((alpha, 1.0 - alpha))
                } else {
                    None
                }
            }
            ActRule::None => unreachable!(),
        };
        match split {
            Some((wc, wr)) => {
                oc[j] = cj * (x + wc * b) + wc * rj;
                or[j] = cj * (y + wr * b) + wr * rj;
                ob[j] = 0.0;
            }
            None => {
                oc[j] = cj * x;
                or[j] = cj * y;
                ob[j] = cj * b + rj;
            }
        }
    }
    let shape = d.shape().to_vec();
    DecomposedTensor::new(vec![
        Tensor::new(shape.clone(), oc)?,
        Tensor::new(shape.clone(), or)?,
        Tensor::new(shape, ob)?,
    ])
}

/// Softmax with recorded chord slopes: plain elementwise scaling, residual to
/// the bias.
pub fn lin_softmax(cache: &RatioCache, d: &DecomposedTensor) -> Result<DecomposedTensor> {
    check_same(cache.ratio.shape(), d.shape(), "softmax")?;
    Ok(scale_with_residual(cache, d))
}

fn scale_with_residual(cache: &RatioCache, d: &DecomposedTensor) -> DecomposedTensor {
    let last = d.modalities();
    let components = d
        .components()
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut out = h.mul(&cache.ratio).expect("shape checked");
            if i == last {
                out.add_assign(&cache.residual).expect("shape checked");
            }
            out
        })
        .collect();
    DecomposedTensor { components }
}

fn check_same(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("cache {a:?} vs input {b:?}")));
    }
    Ok(())
}

/// Weight of the constant term per slot.
fn deltas(uniform: bool, modalities: usize) -> Vec<f64> {
    if uniform {
        vec![1.0 / (modalities + 1) as f64; modalities + 1]
    } else {
        let mut d = vec![0.0; modalities + 1];
        d[modalities] = 1.0;
        d
    }
}

/// Evaluation-mode BatchNorm: every component scaled by `γ/√(σ²+ε)`, the
/// constant `β − μγ/√(σ²+ε)` split by the BN rule.
pub fn lin_batchnorm(
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    d: &DecomposedTensor,
    cfg: &SplitConfig,
) -> Result<DecomposedTensor> {
    if d.shape().first() != Some(&gamma.len()) {
        return Err(Error::shape("batchnorm", format!("{} channels vs input {:?}", gamma.len(), d.shape())));
    }
    let scale = layers::batchnorm_scale(var, gamma, eps);
    let constant: Vec<f64> = scale
        .iter()
        .zip(mean.data())
        .zip(beta.data())
        .map(|((s, m), b)| b - m * s)
        .collect();
    let delta = deltas(cfg.bn_rule == BnRule::Uniform, d.modalities());
    let components = d
        .components()
        .iter()
        .zip(&delta)
        .map(|(h, &dm)| {
            let shift: Vec<f64> = constant.iter().map(|k| dm * k).collect();
            channel_affine(h, &scale, &shift)
        })
        .collect();
    Ok(DecomposedTensor { components })
}

/// LayerNorm / InstanceNorm with the recorded statistics of the live input.
///
/// Ratio rule with live means: each component is centered by its own mean
/// over `axes`, divided by the recorded `√(σ²+ε)`, scaled by `γ`, and `β`
/// goes to the bias. BN-like rules instead subtract `δ_m·μ` with the
/// recorded mean and add `δ_m·β`, with `δ` from the identity or uniform
/// scheme.
pub fn lin_norm(
    axes: &[usize],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    stats: &NormStats,
    d: &DecomposedTensor,
    cfg: &SplitConfig,
) -> Result<DecomposedTensor> {
    let shape = d.shape().to_vec();
    if tensor::reduced_shape(&shape, axes) != stats.var.shape() {
        return Err(Error::shape(
            "norm",
            format!("statistics {:?} do not fit input {shape:?} over axes {axes:?}", stats.var.shape()),
        ));
    }
    let gi = group_index(&shape, axes);
    let ch = channel_of(&shape);
    let inv_std: Vec<f64> = stats.var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let live = cfg.ln_rule == LnRule::Ratio && cfg.ln_stats == LnStats::LiveMean;
    let delta = deltas(cfg.ln_rule == LnRule::Uniform, d.modalities());

    let components = d
        .components()
        .iter()
        .zip(&delta)
        .map(|(h, &dm)| {
            let center = if live {
                tensor::mean(h, axes)?
            } else {
                stats.mean.scale(dm)
            };
            let data = h
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (g, c) = (gi[i], ch(i));
                    gamma.data()[c] * (v - center.data()[g]) * inv_std[g] + dm * beta.data()[c]
                })
                .collect();
            Tensor::new(shape.clone(), data)
        })
        .collect::<Result<_>>()?;
    DecomposedTensor::new(components)
}

/// Bilinear product of two decomposed operands.
///
/// Only same-modality products `A_m·B_m` stay in modality `m`; every cross
/// term and every term with a bias operand goes to the bias component:
/// `bias = A_b·ΣB + Σ_m A_m·(ΣB − B_m)`.
pub fn lin_matmul(
    a: &DecomposedTensor,
    b: &DecomposedTensor,
    transpose_a: bool,
    transpose_b: bool,
    out_shape: Option<&[usize]>,
) -> Result<DecomposedTensor> {
    if a.components().len() != b.components().len() {
        return Err(Error::shape("matmul", "component counts differ"));
    }
    let m = a.modalities();
    let av: Vec<Tensor> = a
        .components()
        .iter()
        .map(|t| matrix_view(t, transpose_a))
        .collect::<Result<_>>()?;
    let bv: Vec<Tensor> = b
        .components()
        .iter()
        .map(|t| matrix_view(t, transpose_b))
        .collect::<Result<_>>()?;
    let b_total = {
        let mut t = bv[0].clone();
        for x in &bv[1..] {
            t.add_assign(x)?;
        }
        t
    };
    let mut components = Vec::with_capacity(m + 1);
    for i in 0..m {
        components.push(tensor::matmul(&av[i], &bv[i])?);
    }
    let mut bias = tensor::matmul(&av[m], &b_total)?;
    for i in 0..m {
        let others = b_total.sub(&bv[i])?;
        bias.add_assign(&tensor::matmul(&av[i], &others)?)?;
    }
    components.push(bias);
    if let Some(s) = out_shape {
        components = components.iter().map(|t| t.reshape(s)).collect::<Result<_>>()?;
    }
    DecomposedTensor::new(components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmd::{chord_ratio, DEFAULT_EPSILON};
    use crate::model::layers::normalize;

    fn dt(parts: &[&[f64]]) -> DecomposedTensor {
        DecomposedTensor::new(parts.iter().map(|p| Tensor::from_vec(p.to_vec())).collect()).unwrap()
    }

    fn relu_cache(pre: &[f64]) -> RatioCache {
        let (mut c, mut r) = (vec![], vec![]);
        for &a in pre {
            let (ci, ri, _) = chord_ratio(a, a.max(0.0), DEFAULT_EPSILON);
            c.push(ci);
            r.push(ri);
        }
        RatioCache {
            ratio: Tensor::from_vec(c),
            residual: Tensor::from_vec(r),
            clamped: vec![],
        }
    }

    #[test]
    fn input_split() {
        let parts = split_fusion_inputs(&[Tensor::scalar(2.0), Tensor::scalar(3.0), Tensor::scalar(4.0)]);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1].components().len(), 4);
        assert_eq!(parts[1].sum().data(), &[3.0]);
        let nonzero: Vec<usize> = (0..4).filter(|&i| parts[1].components()[i].data()[0] != 0.0).collect();
        assert_eq!(nonzero, vec![1]);
    }

    #[test]
    fn dense_rule_example() {
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::scalar(1.0);
        let out = lin_dense(&w, &b, &dt(&[&[1.0], &[2.0], &[0.0]])).unwrap();
        assert_eq!(out, dt(&[&[2.0], &[4.0], &[1.0]]));
        assert_eq!(out.sum().data(), &[7.0]);

        let zero = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let out = lin_dense(&zero, &b, &dt(&[&[1.0], &[2.0], &[5.0]])).unwrap();
        assert_eq!(out, dt(&[&[0.0], &[0.0], &[1.0]]));
    }

    #[test]
    fn concat_and_residual_examples() {
        let a = dt(&[&[1.0], &[0.0], &[0.0]]);
        let b = dt(&[&[0.0], &[2.0], &[0.0]]);
        let c = lin_concat(&[&a, &b], 0).unwrap();
        assert_eq!(c, dt(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]));
        let z = DecomposedTensor::zeros(&[1], 2);
        assert_eq!(lin_residual_add(&a, &z).unwrap(), a);
    }

    #[test]
    fn relu_negative_neuron_zeroes_every_component() {
        let cache = relu_cache(&[-2.0]);
        for act in [ActRule::None, ActRule::Sum, ActRule::Ratio] {
            let cfg = SplitConfig::new(BnRule::Identity, LnRule::Ratio, act);
            let out = lin_activation(&cache, &dt(&[&[-3.0], &[2.0], &[-1.0]]), &cfg).unwrap();
            assert!(out.components().iter().all(|t| t.data()[0] == 0.0));
        }
    }

    #[test]
    fn sum_rule_hand_trace() {
        // (h_c, h_r, h_b) = (-1, 2, 1): radar condition
        let cache = relu_cache(&[2.0]);
        let cfg = SplitConfig::new(BnRule::Identity, LnRule::Ratio, ActRule::Sum);
        let out = lin_activation(&cache, &dt(&[&[-1.0], &[2.0], &[1.0]]), &cfg).unwrap();
        let got: Vec<f64> = out.components().iter().map(|t| t.data()[0]).collect();
        for (g, e) in got.iter().zip([-1.0, 3.0, 0.0]) {
            assert!((g - e).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(got[2], 0.0);
        assert!((out.sum().data()[0] - 2.0).abs() < 1e-15);

        // camera condition mirrors it
        let out = lin_activation(&cache, &dt(&[&[3.0], &[-2.0], &[1.0]]), &cfg).unwrap();
        let got: Vec<f64> = out.components().iter().map(|t| t.data()[0]).collect();
        assert!((got[0] - 4.0).abs() < 1e-5 && (got[1] + 2.0).abs() < 1e-5 && got[2] == 0.0);
    }

    #[test]
    fn ratio_rule_hand_trace() {
        let cache = relu_cache(&[8.0]);
        let cfg = SplitConfig::new(BnRule::Identity, LnRule::Ratio, ActRule::Ratio);
        let out = lin_activation(&cache, &dt(&[&[1.0], &[3.0], &[4.0]]), &cfg).unwrap();
        let got: Vec<f64> = out.components().iter().map(|t| t.data()[0]).collect();
        for (g, e) in got.iter().zip([2.0, 6.0, 0.0]) {
            assert!((g - e).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(got[2], 0.0);
        assert!((out.sum().data()[0] - 8.0).abs() < 1e-14);

        // second condition: bias against both modalities
        let cache = relu_cache(&[2.0]);
        let out = lin_activation(&cache, &dt(&[&[1.0], &[3.0], &[-2.0]]), &cfg).unwrap();
        let got: Vec<f64> = out.components().iter().map(|t| t.data()[0]).collect();
        // α = 0.75 → camera gets α·h_b, radar (1-α)·h_b
        assert!((got[0] + 0.5).abs() < 1e-5 && (got[1] - 2.5).abs() < 1e-5 && got[2] == 0.0);
    }

    #[test]
    fn split_rules_reject_three_modalities() {
        let cache = relu_cache(&[1.0]);
        let cfg = SplitConfig::new(BnRule::Identity, LnRule::Ratio, ActRule::Sum);
        let d = dt(&[&[1.0], &[0.0], &[0.0], &[0.0]]);
        assert!(matches!(lin_activation(&cache, &d, &cfg), Err(Error::Config(_))));
    }

    fn bn(gamma: f64, beta: f64, mu: f64, var: f64, d: &DecomposedTensor, rule: BnRule) -> DecomposedTensor {
        let t = Tensor::scalar;
        let cfg = SplitConfig::new(rule, LnRule::Ratio, ActRule::None);
        lin_batchnorm(&t(mu), &t(var), &t(gamma), &t(beta), 0.0, d, &cfg).unwrap()
    }

    #[test]
    fn batchnorm_rule_examples() {
        let d = dt(&[&[1.0], &[0.0], &[0.5]]);
        assert_eq!(bn(1.0, 0.0, 0.0, 1.0, &d, BnRule::Identity), d);
        let out = bn(2.0, 1.0, 0.5, 1.0, &d, BnRule::Identity);
        assert_eq!(out, dt(&[&[2.0], &[0.0], &[1.0]]));
        assert_eq!(out.sum().data(), &[3.0]);
        // constant β − μγ/σ = 0, so the uniform rule changes nothing
        assert_eq!(bn(2.0, 1.0, 0.5, 1.0, &d, BnRule::Uniform), out);
        let u = bn(1.0, 3.0, 0.0, 1.0, &d, BnRule::Uniform);
        assert_eq!(u, dt(&[&[2.0], &[1.0], &[1.5]]));
    }

    #[test]
    fn layernorm_zero_mean_component_unchanged() {
        let d = dt(&[&[1.0, -1.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let stats = NormStats {
            mean: Tensor::scalar(0.0),
            var: Tensor::scalar(1.0),
        };
        let cfg = SplitConfig::default();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let out = lin_norm(&[0], &g, &b, 0.0, &stats, &d, &cfg).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn norm_sum_matches_frozen_statistics() {
        let x0 = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 1.0, -2.0]).unwrap();
        let x1 = Tensor::new(vec![2, 2, 2], vec![0.2, -0.4, 1.0, 0.0, 1.0, 2.0, 0.5, 0.5]).unwrap();
        let xb = Tensor::full(&[2, 2, 2], 0.3);
        let d = DecomposedTensor::new(vec![x0, x1, xb]).unwrap();
        let total = d.sum();
        let g = Tensor::from_vec(vec![1.5, 0.5]);
        let b = Tensor::from_vec(vec![0.1, -0.2]);
        for axes in [vec![1, 2], vec![0], vec![0, 1, 2]] {
            let (want, mean, var) = normalize(&total, &axes, &g, &b, 1e-5).unwrap();
            let stats = NormStats { mean, var };
            for cfg in SplitConfig::all(2) {
                let out = lin_norm(&axes, &g, &b, 1e-5, &stats, &d, &cfg).unwrap();
                for (x, y) in out.sum().data().iter().zip(want.data()) {
                    assert!((x - y).abs() < 1e-13, "{cfg} {axes:?}");
                }
            }
        }
    }

    #[test]
    fn constant_channel_instance_norm_leaves_only_beta() {
        let c = Tensor::full(&[1, 2, 2], 4.0);
        let d = DecomposedTensor::new(vec![c.clone(), Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 2])]).unwrap();
        let stats = NormStats {
            mean: Tensor::full(&[1, 1, 1], 4.0),
            var: Tensor::full(&[1, 1, 1], 1.0),
        };
        let out = lin_norm(
            &layers::INSTANCE_AXES,
            &Tensor::scalar(2.0),
            &Tensor::scalar(0.7),
            0.0,
            &stats,
            &d,
            &SplitConfig::default(),
        )
        .unwrap();
        assert!(out.components()[0].data().iter().all(|&v| v == 0.0));
        assert!(out.bias().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn softmax_rule_reproduces_output() {
        let logits = [1.0, 1.0];
        let sm = layers::softmax(&Tensor::from_vec(logits.to_vec()), 0);
        let (mut c, mut r) = (vec![], vec![]);
        for (a, f) in logits.iter().zip(sm.data()) {
            let (ci, ri, _) = chord_ratio(*a, *f, DEFAULT_EPSILON);
            c.push(ci);
            r.push(ri);
        }
        assert_eq!(c[0], 0.5 / (1.0 + DEFAULT_EPSILON));
        let cache = RatioCache {
            ratio: Tensor::from_vec(c),
            residual: Tensor::from_vec(r),
            clamped: vec![],
        };
        let d = dt(&[&[0.25, 0.75], &[0.5, -0.5], &[0.25, 0.75]]);
        let out = lin_softmax(&cache, &d).unwrap();
        for (x, y) in out.sum().data().iter().zip(sm.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_scalar_expansion() {
        let a = DecomposedTensor::new(vec![
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let b = DecomposedTensor::new(vec![
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        ])
        .unwrap();
        let out = lin_matmul(&a, &b, false, false, None).unwrap();
        let got: Vec<f64> = out.components().iter().map(|t| t.data()[0]).collect();
        assert_eq!(got, vec![3.0, 0.0, 9.0]);
        assert_eq!(out.sum().data(), &[12.0]);
    }

    #[test]
    fn matmul_with_bias_only_operand() {
        let a = DecomposedTensor::new(vec![
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2, 2]),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ])
        .unwrap();
        let b = DecomposedTensor::new(vec![
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap(),
            Tensor::zeros(&[2, 2]),
        ])
        .unwrap();
        let out = lin_matmul(&a, &b, false, false, None).unwrap();
        assert!(out.components()[0].data().iter().all(|&v| v == 0.0));
        assert!(out.components()[1].data().iter().all(|&v| v == 0.0));
        let want = tensor::matmul(&a.sum(), &b.sum()).unwrap();
        assert_eq!(out.bias(), &want);
    }
}
