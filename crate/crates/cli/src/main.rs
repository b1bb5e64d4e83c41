mod docs;
mod heatmap;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lmd_core::baselines::{lmd_shap, shapley, Redistribution};
use lmd_core::lmd::{ActRule, BnRule, LayerCache, LnRule, DEFAULT_EPSILON};
use lmd_core::metrics::{render_table, variant_matrix, MetricConfig};
use lmd_core::model::{
    forward_output, gen_sample_set, gen_synthetic_model, load_model, load_samples, save_model, save_samples, ActKind,
    GenSpec, NormKind,
};
use lmd_core::{decompose, ModelGraph, SampleSet, SplitConfig, Tensor};

use docs::{AttributionReport, DecomposeReport, LayerResidual, MetricsDoc, NamedTensor};
use heatmap::{Encoding, Normalization};

const EQUALITY_TOLERANCE: f64 = 1e-9;

/// Raised when a numerical contract fails; maps to exit code 3.
#[derive(Debug)]
struct ContractViolation(String);

impl fmt::Display for ContractViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ContractViolation {}

#[derive(Parser)]
#[command(name = "lmd", version, about = "Layer-wise modality decomposition of fusion networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic fusion model.
    GenModel(GenModelArgs),
    /// Generate a seeded sample set for a model.
    GenSamples(GenSamplesArgs),
    /// Decompose one sample into per-modality contributions.
    Decompose(DecomposeArgs),
    /// Separation metrics under modality replacement.
    Metrics(MetricsArgs),
    /// Shapley attribution over modalities.
    Shapley(ShapleyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Batch,
    Layer,
    Instance,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActArg {
    Relu,
    Gelu,
    None,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Normalization kinds cycled through the trunk blocks.
    #[arg(long, value_delimiter = ',', default_value = "batch,layer,instance")]
    norm: Vec<NormArg>,
    /// Activation kinds cycled through the trunk blocks.
    #[arg(long, value_delimiter = ',', default_value = "relu,gelu")]
    activation: Vec<ActArg>,
    /// Append a single-head attention block.
    #[arg(long)]
    attention: bool,
    /// Input grid as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_grid)]
    grid: (usize, usize),
    #[arg(long, default_value_t = 3)]
    in_channels: usize,
    #[arg(long, default_value_t = 4)]
    branch_channels: usize,
    #[arg(long, default_value_t = 8)]
    trunk_channels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSamplesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BnArg {
    Identity,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum LnArg {
    Ratio,
    Identity,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActRuleArg {
    None,
    Sum,
    Ratio,
}

#[derive(Args)]
struct RuleArgs {
    #[arg(long, value_enum, default_value = "identity")]
    bn_rule: BnArg,
    #[arg(long, value_enum, default_value = "ratio")]
    ln_rule: LnArg,
    #[arg(long, value_enum, default_value = "none")]
    act_rule: ActRuleArg,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

impl RuleArgs {
    fn config(&self) -> SplitConfig {
        let bn = match self.bn_rule {
            BnArg::Identity => BnRule::Identity,
            BnArg::Uniform => BnRule::Uniform,
        };
        let ln = match self.ln_rule {
            LnArg::Ratio => LnRule::Ratio,
            LnArg::Identity => LnRule::Identity,
            LnArg::Uniform => LnRule::Uniform,
        };
        let act = match self.act_rule {
            ActRuleArg::None => ActRule::None,
            ActRuleArg::Sum => ActRule::Sum,
            ActRuleArg::Ratio => ActRule::Ratio,
        };
        SplitConfig::new(bn, ln, act).with_epsilon(self.epsilon)
    }
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    rules: RuleArgs,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-component heatmaps.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "positive-pgm")]
    encoding: Encoding,
    /// Heatmap normalization (PGM only).
    #[arg(long, value_enum, default_value = "max-positive")]
    norm: Normalization,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// Modality to replace (name or label); join with `+` for a joint
    /// replacement. Repeat or comma-separate for several. Default: each
    /// modality on its own.
    #[arg(long, value_delimiter = ',')]
    perturb: Vec<String>,
    /// Offset stride; default `max(1, N / (K + 1))`.
    #[arg(long)]
    stride: Option<usize>,
    /// Number of offsets K.
    #[arg(long, default_value_t = 4)]
    offsets: usize,
    /// Rule combinations such as `identity-ratio` or `uniform-identity-sum`.
    #[arg(long, value_delimiter = ',', default_value = "identity-ratio")]
    variants: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Score positive parts instead of raw signed components.
    #[arg(long)]
    positive_part: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the plain-text table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RedistributionArg {
    Shapley,
    Proportional,
}

#[derive(Args)]
struct ShapleyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// LMD + SHAP: redistribute the decomposition's bias component.
    #[arg(long)]
    hybrid: bool,
    #[arg(long, value_enum, default_value = "shapley")]
    redistribution: RedistributionArg,
    #[command(flatten)]
    rules: RuleArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 32x32")?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    write(path, &bytes)
}

fn open_model(path: &Path) -> Result<ModelGraph> {
    load_model(&read(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn open_samples(path: &Path, model: &ModelGraph) -> Result<SampleSet> {
    let set = load_samples(&read(path)?).with_context(|| format!("loading samples {}", path.display()))?;
    set.check_against(model)?;
    Ok(set)
}

fn pick(set: &SampleSet, index: usize) -> Result<&[Tensor]> {
    if index >= set.len() {
        bail!("sample index {index} out of range (N = {})", set.len());
    }
    Ok(set.sample(index))
}

fn named(model: &ModelGraph, tensors: Vec<Tensor>, last: &str) -> Vec<NamedTensor> {
    let names = model.modality_names().iter().cloned().chain([last.to_string()]);
    names
        .zip(tensors)
        .map(|(modality, values)| NamedTensor { modality, values })
        .collect()
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let norms = a
        .norm
        .iter()
        .filter_map(|n| match n {
            NormArg::Batch => Some(NormKind::BatchNorm),
            NormArg::Layer => Some(NormKind::LayerNorm),
            NormArg::Instance => Some(NormKind::InstanceNorm),
            NormArg::None => None,
        })
        .collect();
    let activations = a
        .activation
        .iter()
        .filter_map(|n| match n {
            ActArg::Relu => Some(ActKind::Relu),
            ActArg::Gelu => Some(ActKind::Gelu),
            ActArg::None => None,
        })
        .collect();
    let spec = GenSpec {
        modalities: a.modalities,
        in_channels: a.in_channels,
        grid: a.grid,
        branch_channels: a.branch_channels,
        trunk_channels: a.trunk_channels,
        depth: a.depth,
        norms,
        activations,
        include_attention: a.attention,
        ..GenSpec::default()
    };
    let model = gen_synthetic_model(a.seed, &spec)?;
    write(&a.out, &save_model(&model))?;
    eprintln!("wrote {} layers to {}", model.layers().len(), a.out.display());
    Ok(())
}

fn gen_samples(a: GenSamplesArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let set = gen_sample_set(a.seed, &model, a.n)?;
    write(&a.out, &save_samples(&set))
}

fn map_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        _ => (1, 1, shape.iter().product()),
    }
}

fn export_heatmaps(dir: &Path, maps: &[NamedTensor], encoding: Encoding, norm: Normalization) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = 0;
    for m in maps {
        let (c, h, w) = map_dims(m.values.shape());
        for ch in 0..c {
            let plane = &m.values.data()[ch * h * w..(ch + 1) * h * w];
            let stem = if c == 1 {
                m.modality.clone()
            } else {
                format!("{}_c{ch}", m.modality)
            };
            match encoding {
                Encoding::PositivePgm => write(&dir.join(format!("{stem}.pgm")), &heatmap::pgm(plane, h, w, norm))?,
                Encoding::SignedCsv => write(&dir.join(format!("{stem}.csv")), heatmap::csv(plane, w).as_bytes())?,
            }
            files += 1;
        }
    }
    Ok(files)
}

fn run_decompose(a: DecomposeArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let samples = open_samples(&a.samples, &model)?;
    let inputs = pick(&samples, a.index)?;
    let cfg = a.rules.config();
    let d = decompose(&model, inputs, &cfg)?;
    let residuals = d.residuals();
    let (worst, max_res) = d.max_residual();
    let clamped = (0..model.layers().len())
        .map(|i| match d.state.cache(i) {
            LayerCache::Ratio(r) => r.clamped.len(),
            _ => 0,
        })
        .sum();
    let out = d.output();
    let report = DecomposeReport {
        version: 1,
        variant: cfg.to_string(),
        epsilon: cfg.epsilon,
        index: a.index,
        output: model.output().to_string(),
        shape: out.shape().to_vec(),
        components: named(&model, out.components().to_vec(), "bias"),
        layers: model
            .layers()
            .iter()
            .zip(&residuals)
            .map(|(l, &residual)| LayerResidual {
                id: l.id.clone(),
                kind: l.kind.name().to_string(),
                residual,
            })
            .collect(),
        max_equality_residual: max_res,
        max_residual_layer: model.layers()[worst].id.clone(),
        clamped_neurons: clamped,
    };
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.heatmaps {
        let n = export_heatmaps(dir, &report.components, a.encoding, a.norm)?;
        eprintln!("wrote {n} heatmaps to {}", dir.display());
    }
    if max_res.is_nan() || max_res > EQUALITY_TOLERANCE {
        return Err(ContractViolation(format!(
            "equality residual {max_res:e} exceeds {EQUALITY_TOLERANCE:e} at layer `{}`",
            report.max_residual_layer
        ))
        .into());
    }
    eprintln!("max equality residual {max_res:e} (layer `{}`)", report.max_residual_layer);
    Ok(())
}

fn resolve_modality(model: &ModelGraph, token: &str) -> Result<usize> {
    let labels = model.modality_labels();
    model
        .modality_names()
        .iter()
        .position(|n| n == token)
        .or_else(|| labels.iter().position(|l| l == token))
        .or_else(|| token.parse().ok().filter(|&i: &usize| i < model.modalities()))
        .ok_or_else(|| anyhow!("unknown modality `{token}` (known: {})", model.modality_names().join(", ")))
}

fn run_metrics(a: MetricsArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let samples = open_samples(&a.samples, &model)?;
    let perturb = a
        .perturb
        .iter()
        .map(|set| set.split('+').map(|t| resolve_modality(&model, t.trim())).collect())
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let variants = a
        .variants
        .iter()
        .map(|v| Ok(v.parse::<SplitConfig>()?.with_epsilon(a.epsilon)))
        .collect::<Result<Vec<_>>>()?;
    let mcfg = MetricConfig {
        stride: a.stride,
        offsets: a.offsets,
        perturb,
        positive_part: a.positive_part,
    };
    let offsets = mcfg.offset_list(samples.len())?;
    let reports = variant_matrix(&model, &samples, &variants, &mcfg)?;
    let table = render_table(&reports);
    let doc = MetricsDoc {
        version: 1,
        stride: offsets[0],
        offsets,
        samples: samples.len(),
        positive_part: a.positive_part,
        reports,
    };
    write_json(&a.out, &doc)?;
    if let Some(path) = &a.table {
        write(path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn run_shapley(a: ShapleyArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let samples = open_samples(&a.samples, &model)?;
    let inputs = pick(&samples, a.index)?;
    let cfg = a.rules.config();
    let (attr, method) = if a.hybrid {
        let mode = match a.redistribution {
            RedistributionArg::Shapley => Redistribution::Shapley,
            RedistributionArg::Proportional => Redistribution::Proportional,
        };
        let name = match mode {
            Redistribution::Shapley => format!("lmd-shap:{cfg}"),
            Redistribution::Proportional => format!("lmd-shap-proportional:{cfg}"),
        };
        (lmd_shap(&model, inputs, &cfg, mode)?, name)
    } else {
        (shapley(&model, inputs)?, "shapley".to_string())
    };
    let target = forward_output(&model, inputs)?;
    let residual = attr.efficiency_residual(&target);
    eprintln!("evaluated {} coalitions", attr.evaluations);
    let report = AttributionReport {
        version: 1,
        method,
        index: a.index,
        shape: target.shape().to_vec(),
        evaluations: attr.evaluations,
        components: named(&model, attr.attributions.into_iter().chain([attr.base]).collect(), "base"),
        efficiency_residual: residual,
    };
    write_json(&a.out, &report)?;
    if residual.is_nan() || residual > EQUALITY_TOLERANCE {
        return Err(ContractViolation(format!("efficiency residual {residual:e} exceeds {EQUALITY_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LMD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("LMD_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenSamples(a) => gen_samples(a),
        Command::Decompose(a) => run_decompose(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Shapley(a) => run_shapley(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ContractViolation>() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
