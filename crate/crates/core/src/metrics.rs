//! Separation metrics under modality replacement.
//!
//! For each sample the clean inputs fix the linearization; one modality (or a
//! set of them) is then swapped for the input of a distant sample and every
//! modality component is scored against its clean version.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmd::{propagate_output, record, SplitConfig};
use crate::model::{ModelGraph, SampleSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub value: f64,
    /// One of the inputs was constant; `value` is 0 and should not be averaged.
    pub degenerate: bool,
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Pearson correlation over the flattened entries.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<Pearson> {
    check_pair(a, b, "pearson")?;
    if a.len() < 2 {
        return Err(Error::shape("pearson", "need at least two elements"));
    }
    let (x, y) = (a.data(), b.data());
    if is_constant(x) || is_constant(y) {
        return Ok(Pearson {
            value: 0.0,
            degenerate: true,
        });
    }
    if x == y {
        return Ok(Pearson {
            value: 1.0,
            degenerate: false,
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&u, &v) in x.iter().zip(y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    Ok(Pearson {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "mse")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Offset stride `s`; `None` picks `max(1, N / (K + 1))`.
    pub stride: Option<usize>,
    /// Number of offsets `K`.
    pub offsets: usize,
    /// Modality sets replaced jointly; empty means each modality on its own.
    pub perturb: Vec<Vec<usize>>,
    /// Score the positive parts of the components instead of raw values.
    pub positive_part: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            stride: None,
            offsets: 4,
            perturb: Vec::new(),
            positive_part: false,
        }
    }
}

impl MetricConfig {
    /// Sample offsets `s·m mod N` for `m = 1..=K`.
    pub fn offset_list(&self, n: usize) -> Result<Vec<usize>> {
        if n < 2 {
            return Err(Error::Config(format!("the replacement protocol needs N >= 2 samples, got {n}")));
        }
        if self.offsets == 0 {
            return Err(Error::Config("offset count must be positive".into()));
        }
        let s = self.stride.unwrap_or_else(|| (n / (self.offsets + 1)).max(1));
        if s == 0 {
            return Err(Error::Config("offset stride must be positive".into()));
        }
        let offs: Vec<usize> = (1..=self.offsets).map(|m| (s * m) % n).collect();
        if offs.contains(&0) {
            return Err(Error::Config(format!(
                "stride {s} with {} offsets wraps onto the sample itself (N = {n})",
                self.offsets
            )));
        }
        let mut seen = offs.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != offs.len() {
            return Err(Error::Config(format!("stride {s} repeats offsets modulo N = {n}")));
        }
        Ok(offs)
    }

    /// Perturbation sets, validated against `m` modalities.
    pub fn perturb_sets(&self, m: usize) -> Result<Vec<Vec<usize>>> {
        if self.perturb.is_empty() {
            return Ok((0..m).map(|i| vec![i]).collect());
        }
        for set in &self.perturb {
            let mut s = set.clone();
            s.sort_unstable();
            s.dedup();
            if set.is_empty() || s.len() != set.len() || s.iter().any(|&i| i >= m) {
                return Err(Error::Config(format!("invalid perturbation set {set:?} for {m} modalities")));
            }
        }
        Ok(self.perturb.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// e.g. `R_p`, or `R_p L_p` for a joint replacement.
    pub perturbed: String,
    pub observed: String,
    /// `None` when every comparison of the cell was degenerate.
    pub pcc_mean: Option<f64>,
    pub pcc_std: Option<f64>,
    pub mse_mean: f64,
    pub mse_std: f64,
    /// Comparisons in the cell, degenerate ones included.
    pub n: usize,
    /// Comparisons excluded from the Pearson statistics.
    pub degenerate: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}/{}", self.perturbed, self.observed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub variant: String,
    pub cells: Vec<Cell>,
}

impl SeparationReport {
    pub fn cell(&self, perturbed: &str, observed: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.perturbed == perturbed && c.observed == observed)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        render_table(std::slice::from_ref(self))
    }
}

fn fmt_pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "n/a".to_string(),
    }
}

/// One block per report, columns aligned across blocks.
pub fn render_table(reports: &[SeparationReport]) -> String {
    let rows: Vec<Vec<[String; 5]>> = reports
        .iter()
        .map(|r| {
            r.cells
                .iter()
                .map(|c| {
                    [
                        c.label(),
                        fmt_pm(c.pcc_mean, c.pcc_std),
                        fmt_pm(Some(c.mse_mean), Some(c.mse_std)),
                        c.n.to_string(),
                        c.degenerate.to_string(),
                    ]
                })
                .collect()
        })
        .collect();
    let header = ["cell", "PCC", "MSE", "n", "degenerate"].map(String::from);
    let mut width = header.clone().map(|h| h.chars().count());
    for row in rows.iter().flatten() {
        for (w, s) in width.iter_mut().zip(row) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |cols: &[String; 5]| {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(width).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    for (r, block) in reports.iter().zip(&rows) {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "variant: {}", r.variant);
        let _ = writeln!(out, "{}", line(&header));
        for row in block {
            let _ = writeln!(out, "{}", line(row));
        }
    }
    out
}

/// Mean and population standard deviation, summed in sorted order so the
/// result does not depend on the order the values arrive in.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    Some((mean, (dev.iter().sum::<f64>() / n).sqrt()))
}

fn perturbed_label(labels: &[String], set: &[usize]) -> String {
    set.iter()
        .map(|&i| format!("{}_p", labels[i]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy)]
struct Score {
    pcc: Pearson,
    mse: f64,
}

/// Generic replacement protocol.
///
/// `prepare` is called once per sample with the clean inputs and returns the
/// attribution function for that sample; it maps a (possibly perturbed)
/// input list to one tensor per modality. Samples are processed in parallel
/// and merged in sample order.
pub fn replacement_protocol<P, F>(
    samples: &SampleSet,
    labels: &[String],
    perturb: &[Vec<usize>],
    offsets: &[usize],
    positive_part: bool,
    variant: String,
    prepare: P,
) -> Result<SeparationReport>
where
    P: Fn(&[Tensor]) -> Result<F> + Sync,
    F: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!("the replacement protocol needs N >= 2 samples, got {n}")));
    }
    let m = labels.len();
    let view = |t: Tensor| if positive_part { t.map(|v| v.max(0.0)) } else { t };

    // per sample: [set][offset][observed]
    let per_sample: Vec<Vec<Vec<Vec<Score>>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let clean_inputs = samples.sample(k);
            let attribute = prepare(clean_inputs)?;
            let clean: Vec<Tensor> = attribute(clean_inputs)?.into_iter().map(view).collect();
            if clean.len() != m {
                return Err(Error::Config(format!("attribution returned {} maps for {m} modalities", clean.len())));
            }
            perturb
                .iter()
                .map(|set| {
                    offsets
                        .iter()
                        .map(|&off| {
                            let donor = samples.sample((k + off) % n);
                            let mut inputs = clean_inputs.to_vec();
                            for &p in set {
                                inputs[p] = donor[p].clone();
                            }
                            let pert: Vec<Tensor> = attribute(&inputs)?.into_iter().map(view).collect();
                            clean
                                .iter()
                                .zip(&pert)
                                .map(|(c, p)| {
                                    Ok(Score {
                                        pcc: pearson(c, p)?,
                                        mse: mse(c, p)?,
                                    })
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(perturb.len() * m);
    for (si, set) in perturb.iter().enumerate() {
        for o in 0..m {
            let scores: Vec<Score> = per_sample
                .iter()
                .flat_map(|s| s[si].iter().map(move |per_off| per_off[o]))
                .collect();
            let pcc: Vec<f64> = scores.iter().filter(|s| !s.pcc.degenerate).map(|s| s.pcc.value).collect();
            let mses: Vec<f64> = scores.iter().map(|s| s.mse).collect();
            let pcc_stats = mean_std(&pcc);
            let (mse_mean, mse_std) = mean_std(&mses).unwrap_or((0.0, 0.0));
            cells.push(Cell {
                perturbed: perturbed_label(labels, set),
                observed: labels[o].clone(),
                pcc_mean: pcc_stats.map(|p| p.0),
                pcc_std: pcc_stats.map(|p| p.1),
                mse_mean,
                mse_std,
                n: scores.len(),
                degenerate: scores.len() - pcc.len(),
            });
        }
    }
    Ok(SeparationReport { variant, cells })
}

/// LMD separation metrics for one rule combination at explicit offsets.
///
/// Offsets are not validated, so offset 0 (replacing a modality with
/// itself) is allowed here.
pub fn protocol_at_offsets(
    model: &ModelGraph,
    samples: &SampleSet,
    cfg: &SplitConfig,
    perturb: &[Vec<usize>],
    offsets: &[usize],
    positive_part: bool,
) -> Result<SeparationReport> {
    cfg.validate(model.modalities())?;
    samples.check_against(model)?;
    let m = model.modalities();
    replacement_protocol(
        samples,
        &model.modality_labels(),
        perturb,
        offsets,
        positive_part,
        cfg.to_string(),
        |clean: &[Tensor]| {
            let state = record(model, clean, cfg.epsilon)?;
            Ok(move |inputs: &[Tensor]| {
                let d = propagate_output(model, &state, inputs, cfg)?;
                Ok(d.into_components().into_iter().take(m).collect())
            })
        },
    )
}

pub fn perturbation_protocol(
    model: &ModelGraph,
    samples: &SampleSet,
    cfg: &SplitConfig,
    mcfg: &MetricConfig,
) -> Result<SeparationReport> {
    let offsets = mcfg.offset_list(samples.len())?;
    let sets = mcfg.perturb_sets(model.modalities())?;
    protocol_at_offsets(model, samples, cfg, &sets, &offsets, mcfg.positive_part)
}

pub fn variant_matrix(
    model: &ModelGraph,
    samples: &SampleSet,
    variants: &[SplitConfig],
    mcfg: &MetricConfig,
) -> Result<Vec<SeparationReport>> {
    if variants.is_empty() {
        return Err(Error::Config("at least one variant is required".into()));
    }
    variants
        .iter()
        .map(|cfg| perturbation_protocol(model, samples, cfg, mcfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmd::{ActRule, BnRule, LnRule};
    use crate::model::{gen_sample_set, gen_synthetic_model, GenSpec};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap().value, 1.0);
        assert!((pearson(&v(&[1.0, 2.0, 3.0]), &v(&[3.0, 2.0, 1.0])).unwrap().value + 1.0).abs() < 1e-15);
        let r = pearson(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 1.0, 2.0])).unwrap().value;
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-15);
        let d = pearson(&v(&[1.0, 1.0]), &v(&[1.0, 2.0])).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(pearson(&v(&[1.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mse(&v(&[1.0, 2.0]), &v(&[0.0, 4.0])).unwrap(), 2.5);
        assert!(mse(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.1f64..10.0,
            beta in -10.0f64..10.0,
        ) {
            let (ta, tb) = (v(&a), v(&b));
            let p = pearson(&ta, &tb).unwrap();
            prop_assume!(!p.degenerate);
            let q = pearson(&ta, &tb.map(|x| alpha * x + beta)).unwrap();
            prop_assert!((p.value - q.value).abs() <= 1e-12, "{} vs {}", p.value, q.value);
        }

        #[test]
        fn mse_zero_iff_equal(a in prop::collection::vec(-5.0f64..5.0, 1..10), j in 0usize..10, d in 1e-6f64..1.0) {
            let t = v(&a);
            prop_assert_eq!(mse(&t, &t).unwrap(), 0.0);
            let mut b = a.clone();
            let j = j % b.len();
            b[j] += d;
            prop_assert!(mse(&t, &v(&b)).unwrap() > 0.0);
        }

        #[test]
        fn aggregation_is_order_invariant(mut x in prop::collection::vec(-100.0f64..100.0, 1..40), seed in any::<u64>()) {
            let before = mean_std(&x).unwrap();
            let k = (seed as usize) % x.len();
            x.rotate_left(k);
            x.reverse();
            prop_assert_eq!(mean_std(&x).unwrap(), before);
        }
    }

    #[test]
    fn offsets_follow_stride() {
        let mcfg = MetricConfig::default();
        assert_eq!(mcfg.offset_list(20).unwrap(), vec![4, 8, 12, 16]);
        let bad = MetricConfig {
            stride: Some(5),
            ..MetricConfig::default()
        };
        assert!(bad.offset_list(20).is_err());
        assert!(mcfg.offset_list(1).is_err());
        assert!(MetricConfig {
            perturb: vec![vec![0, 0]],
            ..MetricConfig::default()
        }
        .perturb_sets(2)
        .is_err());
    }

    fn setup() -> (ModelGraph, SampleSet) {
        let spec = GenSpec {
            grid: (6, 6),
            include_attention: true,
            ..GenSpec::default()
        };
        let m = gen_synthetic_model(21, &spec).unwrap();
        let s = gen_sample_set(21, &m, 6).unwrap();
        (m, s)
    }

    #[test]
    fn unperturbed_cells_are_ideal() {
        let (m, s) = setup();
        let mcfg = MetricConfig {
            offsets: 2,
            ..MetricConfig::default()
        };
        let r = perturbation_protocol(&m, &s, &SplitConfig::default(), &mcfg).unwrap();
        assert_eq!(r.cells.len(), 4);
        for (p, o) in [("C_p", "R"), ("R_p", "C")] {
            let c = r.cell(p, o).unwrap();
            assert_eq!((c.pcc_mean, c.pcc_std), (Some(1.0), Some(0.0)), "{p}/{o}");
            assert_eq!((c.mse_mean, c.mse_std), (0.0, 0.0));
            assert_eq!(c.n, 12);
        }
        assert!(r.cell("C_p", "C").unwrap().pcc_mean.unwrap() < 1.0);
    }

    #[test]
    fn identity_perturbation_is_perfect() {
        let (m, s) = setup();
        let r = protocol_at_offsets(&m, &s, &SplitConfig::default(), &[vec![0], vec![1]], &[0], false).unwrap();
        for c in &r.cells {
            assert_eq!(c.pcc_mean, Some(1.0));
            assert_eq!(c.mse_mean, 0.0);
        }
    }

    #[test]
    fn variant_matrix_blocks() {
        let (m, s) = setup();
        let mcfg = MetricConfig {
            offsets: 1,
            ..MetricConfig::default()
        };
        assert!(variant_matrix(&m, &s, &[], &mcfg).is_err());
        let variants = [
            SplitConfig::default(),
            SplitConfig::new(BnRule::Uniform, LnRule::Identity, ActRule::None),
        ];
        let reports = variant_matrix(&m, &s, &variants, &mcfg).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert_eq!(r.cell("R_p", "C").unwrap().pcc_mean, Some(1.0));
        }
        let single = perturbation_protocol(&m, &s, &variants[0], &mcfg).unwrap();
        assert_eq!(single, reports[0]);
        let table = render_table(&reports);
        assert_eq!(table.matches("variant:").count(), 2);
        assert!(table.contains("R_p/C"));
        let json = serde_json::to_string(&reports[1]).unwrap();
        let back: SeparationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reports[1]);
    }

    #[test]
    fn joint_perturbation_labels() {
        let spec = GenSpec {
            modalities: 3,
            grid: (5, 5),
            ..GenSpec::default()
        };
        let m = gen_synthetic_model(2, &spec).unwrap();
        let s = gen_sample_set(2, &m, 4).unwrap();
        let mcfg = MetricConfig {
            offsets: 1,
            perturb: vec![vec![1, 2]],
            ..MetricConfig::default()
        };
        let r = perturbation_protocol(&m, &s, &SplitConfig::default(), &mcfg).unwrap();
        let c = r.cell("R_p L_p", "C").unwrap();
        assert_eq!(c.pcc_mean, Some(1.0));
        assert_eq!(r.cells.len(), 3);
    }
}
