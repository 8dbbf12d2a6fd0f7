//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use moelens_core::balance::{train_balance, BatchMode, CorrelatedModel, NoiseKind, TrainConfig};
use moelens_core::bound::{
    bound_report, router_data_alignment, summarize, triangle_scatter, BoundSet, DistanceKind, PairSelection,
    SubspaceMode,
};
use moelens_core::capture::{CaptureBundle, Gate, LayerRecord};
use moelens_core::metrics::{
    layer_metric_series, sequence_pair_metrics, ConfidenceConvention, DEFAULT_POOL_EPSILON,
};
use moelens_core::pairs::{PairPlan, DEFAULT_PAIR_BUDGET};
use moelens_core::protocol::{
    duplication_study, expert_mask_study, mask_plan, ood_confidence_study, overlap_grid, pool_grids,
    rollout_tracking_all, subspace_truncation_agreement, DuplicationInput, Window, DEFAULT_GROUP_KEYS,
    DEFAULT_SLIDING_WIDTH,
};
use moelens_core::spectral::svd;
use moelens_core::synth::{synth_bundle, SynthConfig, SynthData};

use crate::format::{self, FormatError};
use crate::manifest::{FileDigest, RunManifest};
use crate::report::{LongTable, Outputs};

#[derive(Debug, Parser)]
#[command(name = "moelens", version, about = "Routing-geometry analyses of mixture-of-experts captures")]
pub struct Cli {
    /// Seed for every randomised step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "moelens-out")]
    pub out: PathBuf,
    /// Inclusive layer-index range `a..b`, or a single index.
    #[arg(long, global = true)]
    pub layers: Option<LayerRange>,
    /// Maximum token pairs per layer before subsampling.
    #[arg(long, global = true, default_value_t = DEFAULT_PAIR_BUDGET)]
    pub pair_budget: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRange {
    pub first: u32,
    pub last: u32,
}

impl LayerRange {
    pub fn contains(&self, idx: u32) -> bool {
        (self.first..=self.last).contains(&idx)
    }
}

impl FromStr for LayerRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad layer index {v:?}: {e}"));
        let (first, last) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let v = parse(s)?;
                (v, v)
            }
        };
        if first > last {
            return Err(format!("empty layer range {s}"));
        }
        Ok(Self { first, last })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a capture file and print a JSON report.
    Validate { path: PathBuf },
    /// Write a seeded synthetic capture.
    Synth(SynthArgs),
    /// Run a study.
    Analyze {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GateArg {
    Softmax,
    SigmoidNormalize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub model_id: String,
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "softmax")]
    pub gate: GateArg,
    /// Low-rank data of this rank instead of a shared mean plus noise.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub mu_norm: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub router_scale: f64,
    #[arg(long)]
    pub no_logits: bool,
    #[arg(long)]
    pub no_usage: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Pooled,
    PerSequence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistanceArg {
    Rms,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    Softmax,
    SigmoidNormalize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WindowArg {
    Cumulative,
    Sliding,
    RolloutOnly,
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// Sharp vs naive logit-distance bounds for token pairs.
    Bound {
        input: PathBuf,
        /// Subspace rank; defaults to 99% of the spectral energy.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, value_enum, default_value = "pooled")]
        mode: ModeArg,
    },
    /// Hidden-state vs logit distances per token pair.
    Scatter {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "rms")]
        distance: DistanceArg,
        #[arg(long)]
        exclude_first_token: bool,
    },
    /// Per-sequence and sequence-pair routing metrics.
    Metrics {
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        p: f64,
        #[arg(long, default_value_t = DEFAULT_POOL_EPSILON)]
        eps: f64,
    },
    /// Router confidence and alignment, baseline vs perturbed capture.
    Ood {
        base: PathBuf,
        perturbed: PathBuf,
        #[arg(long, value_enum, default_value = "softmax")]
        convention: ConventionArg,
    },
    /// Cross-domain diagnostics over captures of duplicated inputs.
    Duplication {
        /// `factor=path`, factors ascending from 1.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        /// `seq_a,seq_b` sequence pair, repeatable.
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_POOL_EPSILON)]
        eps: f64,
    },
    /// Restrict routing to a reference sequence's most-used experts.
    Mask {
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        m: usize,
    },
    /// Routing agreement when hidden states are truncated to K principal directions.
    Truncation {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        m: Vec<usize>,
    },
    /// Frequency similarity of two sequences along their tokens.
    Rollout {
        input: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, value_enum, default_value = "cumulative")]
        window: WindowArg,
        #[arg(long, default_value_t = DEFAULT_SLIDING_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Top-p expert overlap grouped by shared sequence labels, one capture per model.
    OverlapGrid {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        p: f64,
        #[arg(long, value_delimiter = ',')]
        keys: Option<Vec<String>>,
    },
    /// Train a router on the balancing loss alone over correlated hidden states.
    BalanceTrain(BalanceArgs),
    /// Router/data alignment over a grid of subspace ranks.
    Alignment {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        r_grid: Vec<usize>,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct BalanceArgs {
    #[arg(long = "D", default_value_t = 16)]
    pub dim: usize,
    #[arg(long = "E", default_value_t = 8)]
    pub experts: usize,
    #[arg(long = "N", default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mu_norm: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub init: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Micro-batch size; full batch when absent.
    #[arg(long)]
    pub batch: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("MOELENS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call (e.g. from tests in one process) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Validate { path } => Ok(validate(path)),
        Command::Synth(a) => synth(cli, a).map(|_| 0),
        Command::Analyze { study } => analyze(cli, study).map(|_| 0),
    }
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    path: PathBuf,
    valid: bool,
    error_class: Option<&'static str>,
    message: Option<String>,
    violations: Vec<moelens_core::capture::Violation>,
    layers: Option<usize>,
    sequences: Option<usize>,
    tokens: Option<usize>,
}

/// Exit code 0 when valid, 1 when the file is readable but invalid, 2 on I/O errors.
fn validate(path: &Path) -> i32 {
    let mut report = ValidationReport {
        path: path.to_path_buf(),
        valid: false,
        error_class: None,
        message: None,
        violations: Vec::new(),
        layers: None,
        sequences: None,
        tokens: None,
    };
    let result = std::fs::read(path)
        .map_err(FormatError::from)
        .and_then(|bytes| format::decode_unchecked(&bytes));
    let code = match result {
        Ok(bundle) => {
            report.layers = Some(bundle.layers.len());
            report.sequences = Some(bundle.sequences.len());
            report.tokens = Some(bundle.total_tokens());
            report.violations = bundle.violations();
            report.valid = report.violations.is_empty();
            if report.valid {
                0
            } else {
                report.error_class = Some("validation");
                report.message = Some(format!("{} invariant violation(s)", report.violations.len()));
                1
            }
        }
        Err(e) => {
            report.error_class = Some(e.class());
            report.message = Some(e.to_string());
            if let FormatError::ChecksumMismatch { .. } = e {
                report.violations.push(moelens_core::capture::Violation {
                    field: "checksum".into(),
                    index: None,
                    message: e.to_string(),
                });
            }
            if matches!(e, FormatError::Io(_)) {
                2
            } else {
                1
            }
        }
    };
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    // a closed pipe is not the capture's fault
    let _ = writeln!(std::io::stdout(), "{text}");
    code
}

fn synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let config = SynthConfig {
        seed: cli.seed,
        model_id: a.model_id.clone(),
        layers: a.num_layers,
        sequences: a.sequences,
        seq_len: a.seq_len,
        hidden_dim: a.hidden_dim,
        experts: a.experts,
        top_k: a.top_k,
        gate: match a.gate {
            GateArg::Softmax => Gate::Softmax,
            GateArg::SigmoidNormalize => Gate::SigmoidNormalize,
        },
        data: match a.rank {
            Some(rank) => SynthData::LowRank { rank, noise: a.noise },
            None => SynthData::Correlated {
                mu_norm: a.mu_norm,
                noise: a.noise,
            },
        },
        router_scale: a.router_scale,
        with_logits: !a.no_logits,
        with_usage: !a.no_usage,
    };
    let bundle = synth_bundle(&config)?;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = format::write_capture_file(&bundle, &a.output)?;
    eprintln!("wrote {} ({bytes} bytes)", a.output.display());
    Ok(())
}

fn load(path: &Path, layers: Option<LayerRange>) -> anyhow::Result<CaptureBundle> {
    let mut b = format::read_capture_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(range) = layers {
        b.layers.retain(|l| range.contains(l.layer_index));
        if b.layers.is_empty() {
            bail!("no layers of {} fall in {}..{}", path.display(), range.first, range.last);
        }
    }
    Ok(b)
}

/// Runs `f` over the layers in parallel, keeping layer order.
fn per_layer<T: Send>(
    bundle: &CaptureBundle,
    f: impl Fn(&LayerRecord) -> anyhow::Result<T> + Sync,
) -> anyhow::Result<Vec<T>> {
    bundle.layers.par_iter().map(&f).collect()
}

fn plan(cli: &Cli) -> PairPlan {
    PairPlan {
        budget: cli.pair_budget,
        seed: cli.seed,
    }
}

struct Run {
    manifest: RunManifest,
    outputs: Outputs,
    started: Instant,
}

impl Run {
    fn start(cli: &Cli, study: &str, parameters: serde_json::Value, inputs: &[&Path]) -> anyhow::Result<Self> {
        let mut manifest = RunManifest::new(study, parameters, cli.seed);
        for p in inputs {
            manifest.inputs.push(FileDigest::of(p)?);
        }
        Ok(Self {
            manifest,
            outputs: Outputs::new(&cli.out)?,
            started: Instant::now(),
        })
    }

    fn finish(mut self) -> anyhow::Result<()> {
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        for f in &self.outputs.files {
            self.manifest.outputs.push(FileDigest::of(f)?);
        }
        let name = format!("{}_manifest.json", self.manifest.study);
        crate::report::write_json(&self.outputs.dir().join(name), &self.manifest)?;
        for f in &self.outputs.files {
            eprintln!("wrote {}", f.display());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct BoundPairRow {
    layer: u32,
    subspace: String,
    i: usize,
    j: usize,
    logit_distance: f64,
    alignment: f64,
    projected_distance: f64,
    residual: f64,
    sharp_bound: f64,
    naive_bound: f64,
    residual_ratio: f64,
    holds: bool,
}

fn subspace_key(bundle: &CaptureBundle, set: &BoundSet) -> String {
    match set.sequence {
        None => "pooled".into(),
        Some(i) => bundle.sequences[i].sequence_id.clone(),
    }
}

#[derive(Serialize)]
struct ScatterRow {
    layer: u32,
    i: usize,
    j: usize,
    hidden_distance: f64,
    logit_distance: f64,
    first_token: bool,
}

#[derive(Serialize)]
struct PairMetricRow {
    layer: u32,
    sequence_a: String,
    sequence_b: String,
    frequency_similarity: f64,
    pooled_similarity: f64,
    overlap: f64,
}

#[derive(Serialize)]
struct RolloutRow {
    layer: u32,
    position: usize,
    similarity: f64,
    after_boundary: bool,
}

fn parse_factor_input(s: &str) -> anyhow::Result<(u32, PathBuf)> {
    let (f, p) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("duplication input {s:?} is not factor=path"))?;
    Ok((f.trim().parse().with_context(|| format!("factor in {s:?}"))?, PathBuf::from(p)))
}

fn parse_pair(s: &str) -> anyhow::Result<(String, String)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("pair {s:?} is not seq_a,seq_b"))?;
    Ok((a.trim().into(), b.trim().into()))
}

fn analyze(cli: &Cli, study: &Study) -> anyhow::Result<()> {
    match study {
        Study::Bound { input, r, mode } => {
            let bundle = load(input, cli.layers)?;
            let mode = match mode {
                ModeArg::Pooled => SubspaceMode::Pooled,
                ModeArg::PerSequence => SubspaceMode::PerSequence,
            };
            let params = json!({ "r": r, "mode": mode, "pair_budget": cli.pair_budget });
            let mut run = Run::start(cli, "bound", params, &[input])?;
            let sel = PairSelection::All(plan(cli));
            let sets = per_layer(&bundle, |l| Ok(bound_report(&bundle, l, *r, &sel, mode)?))?;
            let mut long = LongTable::new("bound");
            let mut pairs = Vec::new();
            let mut summaries = Vec::new();
            for set in sets.iter().flatten() {
                let key = subspace_key(&bundle, set);
                let s = summarize(&set.reports);
                for (name, v) in [
                    ("r", set.r as f64),
                    ("rank", set.rank as f64),
                    ("alignment", set.alignment),
                    ("router_norm", set.router_norm),
                    ("pairs", s.pairs as f64),
                    ("violations", s.violations as f64),
                ] {
                    long.push(set.layer_index, key.clone(), name, v);
                }
                for (i, q) in s.quantile_levels.iter().enumerate() {
                    let pct = (q * 100.0).round() as u32;
                    long.push(set.layer_index, key.clone(), &format!("residual_ratio_q{pct:02}"), s.residual_ratio_quantiles[i]);
                    long.push(set.layer_index, key.clone(), &format!("slack_q{pct:02}"), s.slack_quantiles[i]);
                    long.push(set.layer_index, key.clone(), &format!("sharpness_q{pct:02}"), s.sharpness_quantiles[i]);
                }
                for rep in &set.reports {
                    pairs.push(BoundPairRow {
                        layer: set.layer_index,
                        subspace: key.clone(),
                        i: rep.i,
                        j: rep.j,
                        logit_distance: rep.logit_distance,
                        alignment: rep.alignment,
                        projected_distance: rep.projected_distance,
                        residual: rep.residual,
                        sharp_bound: rep.sharp_bound,
                        naive_bound: rep.naive_bound,
                        residual_ratio: rep.residual_ratio,
                        holds: rep.holds(),
                    });
                }
                summaries.push(json!({
                    "layer": set.layer_index,
                    "subspace": key,
                    "r": set.r,
                    "rank": set.rank,
                    "subsampled": set.subsampled,
                    "summary": s,
                }));
            }
            let total_violations: usize = sets.iter().flatten().map(BoundSet::violations).sum();
            run.outputs.long("bound.csv", &long.rows)?;
            run.outputs.csv("bound_pairs.csv", &pairs)?;
            run.outputs.json(
                "bound_summary.json",
                &json!({ "pairs": pairs.len(), "violations": total_violations, "sets": summaries }),
            )?;
            run.finish()
        }
        Study::Scatter {
            input,
            distance,
            exclude_first_token,
        } => {
            let bundle = load(input, cli.layers)?;
            let kind = match distance {
                DistanceArg::Rms => DistanceKind::Rms,
                DistanceArg::L2 => DistanceKind::L2,
            };
            let params = json!({ "distance": kind, "exclude_first_token": exclude_first_token });
            let mut run = Run::start(cli, "scatter", params, &[input])?;
            let series = per_layer(&bundle, |l| Ok(triangle_scatter(&bundle, l, kind, *exclude_first_token, plan(cli))?))?;
            let mut long = LongTable::new("scatter");
            let mut rows = Vec::new();
            for s in &series {
                let flagged = s.outlier_flags.iter().filter(|&&f| f).count();
                long.push(s.layer_index, "", "pairs", s.pairs.len() as f64);
                long.push(s.layer_index, "", "first_token_pairs", flagged as f64);
                long.push(s.layer_index, "", "subsampled", f64::from(u8::from(s.subsampled)));
                for ((&(i, j), &(hd, ld)), &flag) in s.pairs.iter().zip(&s.points).zip(&s.outlier_flags) {
                    rows.push(ScatterRow {
                        layer: s.layer_index,
                        i,
                        j,
                        hidden_distance: hd,
                        logit_distance: ld,
                        first_token: flag,
                    });
                }
            }
            run.outputs.long("scatter.csv", &long.rows)?;
            run.outputs.csv("scatter_pairs.csv", &rows)?;
            run.finish()
        }
        Study::Metrics { input, p, eps } => {
            let bundle = load(input, cli.layers)?;
            let mut run = Run::start(cli, "metrics", json!({ "p": p, "eps": eps }), &[input])?;
            let per = per_layer(&bundle, |l| {
                Ok((layer_metric_series(&bundle, l)?, sequence_pair_metrics(&bundle, l, *p, *eps)?))
            })?;
            let mut long = LongTable::new("metrics");
            let mut pair_rows = Vec::new();
            for (series, pairs) in &per {
                for s in series {
                    for (id, v) in s.sequence_ids.iter().zip(&s.per_sequence_values) {
                        long.push(s.layer_index, id.clone(), &s.metric_name, *v);
                    }
                    long.push(s.layer_index, "", &format!("{}_mean", s.metric_name), s.mean);
                    long.push(s.layer_index, "", &format!("{}_std", s.metric_name), s.std);
                }
                let cols: [(&str, fn(&moelens_core::metrics::SequencePairMetrics) -> f64); 3] = [
                    ("frequency_similarity", |m| m.frequency_similarity),
                    ("pooled_similarity", |m| m.pooled_similarity),
                    ("overlap", |m| m.overlap),
                ];
                for m in pairs {
                    let key = format!("{}|{}", m.sequence_a, m.sequence_b);
                    for (name, get) in cols {
                        long.push(m.layer_index, key.clone(), name, get(m));
                    }
                    pair_rows.push(PairMetricRow {
                        layer: m.layer_index,
                        sequence_a: m.sequence_a.clone(),
                        sequence_b: m.sequence_b.clone(),
                        frequency_similarity: m.frequency_similarity,
                        pooled_similarity: m.pooled_similarity,
                        overlap: m.overlap,
                    });
                }
            }
            run.outputs.long("metrics.csv", &long.rows)?;
            run.outputs.csv("metrics_pairs.csv", &pair_rows)?;
            run.finish()
        }
        Study::Ood {
            base,
            perturbed,
            convention,
        } => {
            let a = load(base, cli.layers)?;
            let b = load(perturbed, cli.layers)?;
            let convention = match convention {
                ConventionArg::Softmax => ConfidenceConvention::Softmax,
                ConventionArg::SigmoidNormalize => ConfidenceConvention::SigmoidNormalize,
            };
            let mut run = Run::start(cli, "ood", json!({ "convention": convention }), &[base, perturbed])?;
            let rows = ood_confidence_study(&a, &b, convention)?;
            let mut long = LongTable::new("ood");
            for r in &rows {
                for (name, v) in [
                    ("confidence_base", r.confidence_base),
                    ("confidence_ood", r.confidence_ood),
                    ("confidence_gap", r.confidence_gap()),
                    ("alignment_base", r.alignment_base),
                    ("alignment_ood", r.alignment_ood),
                    ("rank_base", r.rank_base as f64),
                    ("rank_ood", r.rank_ood as f64),
                ] {
                    long.push(r.layer_index, "", name, v);
                }
            }
            run.outputs.long("ood.csv", &long.rows)?;
            run.finish()
        }
        Study::Duplication { inputs, pairs, eps } => {
            let parsed: Vec<(u32, PathBuf)> = inputs.iter().map(|s| parse_factor_input(s)).collect::<Result<_, _>>()?;
            let domain_pairs: Vec<(String, String)> = pairs.iter().map(|s| parse_pair(s)).collect::<Result<_, _>>()?;
            let paths: Vec<&Path> = parsed.iter().map(|(_, p)| p.as_path()).collect();
            let params = json!({ "factors": parsed.iter().map(|(f, _)| f).collect::<Vec<_>>(), "pairs": domain_pairs, "eps": eps });
            let mut run = Run::start(cli, "duplication", params, &paths)?;
            let dup_inputs = parsed
                .iter()
                .map(|(factor, p)| {
                    Ok(DuplicationInput {
                        factor: *factor,
                        bundle: load(p, cli.layers)?,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let rows = duplication_study(&dup_inputs, &domain_pairs, *eps)?;
            let mut long = LongTable::new("duplication");
            for r in &rows {
                let key = format!("factor={}", r.factor);
                for (name, v) in [
                    ("token_cosine", r.token_cosine),
                    ("pooled_similarity", r.pooled_similarity),
                    ("hamming", r.hamming),
                    ("frequency_similarity", r.frequency_similarity),
                ] {
                    long.push(r.layer_index, key.clone(), name, v);
                }
            }
            run.outputs.long("duplication.csv", &long.rows)?;
            run.outputs.csv("duplication_wide.csv", &rows)?;
            run.finish()
        }
        Study::Mask {
            input,
            reference,
            sequence,
            m,
        } => {
            let eval = load(input, cli.layers)?;
            let refb = load(reference, cli.layers)?;
            let range = cli.layers.map_or_else(
                || {
                    let ids = refb.layers.iter().map(|l| l.layer_index);
                    (ids.clone().min().unwrap_or(0), ids.max().unwrap_or(0))
                },
                |r| (r.first, r.last),
            );
            let params = json!({ "sequence": sequence, "m": m, "layer_range": range });
            let mut run = Run::start(cli, "mask", params, &[input, reference])?;
            let plan = mask_plan(&refb, sequence, *m, range)?;
            let st = expert_mask_study(&plan, &eval)?;
            let mut long = LongTable::new("mask");
            for l in &st.layers {
                long.push(l.layer_index, "", "coverage", l.coverage);
                long.push(l.layer_index, "", "agreement", l.agreement);
                long.push(l.layer_index, "", "tokens", l.tokens as f64);
            }
            long.push("all", "", "coverage", st.coverage);
            long.push("all", "", "agreement", st.agreement);
            run.outputs.long("mask.csv", &long.rows)?;
            run.outputs.json("mask_plan.json", &st.plan)?;
            run.finish()
        }
        Study::Truncation { input, k, m } => {
            let bundle = load(input, cli.layers)?;
            let mut run = Run::start(cli, "truncation", json!({ "k": k, "m": m }), &[input])?;
            let per = per_layer(&bundle, |l| Ok((l.layer_index, subspace_truncation_agreement(l, k, m)?)))?;
            let mut long = LongTable::new("truncation");
            for (idx, pts) in &per {
                for pt in pts {
                    long.push(idx, format!("k={},m={}", pt.k, pt.m), "agreement", pt.agreement);
                }
            }
            run.outputs.long("truncation.csv", &long.rows)?;
            run.finish()
        }
        Study::Rollout {
            input,
            a,
            b,
            window,
            width,
            stride,
        } => {
            let bundle = load(input, cli.layers)?;
            let w = match window {
                WindowArg::Cumulative => Window::Cumulative,
                WindowArg::Sliding => Window::Sliding(*width),
                WindowArg::RolloutOnly => Window::RolloutOnly,
            };
            let params = json!({ "a": a, "b": b, "window": w, "stride": stride });
            let mut run = Run::start(cli, "rollout", params, &[input])?;
            let curves = rollout_tracking_all(&bundle, (a, b), w, *stride)?;
            let mut long = LongTable::new("rollout");
            let mut rows = Vec::new();
            for c in &curves {
                long.push(c.layer_index, "", "boundary_a", c.boundary_a as f64);
                long.push(c.layer_index, "", "boundary_b", c.boundary_b as f64);
                for pt in &c.points {
                    long.push(c.layer_index, format!("t={}", pt.position), "similarity", pt.similarity);
                    rows.push(RolloutRow {
                        layer: c.layer_index,
                        position: pt.position,
                        similarity: pt.similarity,
                        after_boundary: pt.after_boundary,
                    });
                }
            }
            run.outputs.long("rollout.csv", &long.rows)?;
            run.outputs.csv("rollout_curve.csv", &rows)?;
            run.finish()
        }
        Study::OverlapGrid { inputs, p, keys } => {
            let keys: Vec<String> = keys
                .clone()
                .unwrap_or_else(|| DEFAULT_GROUP_KEYS.iter().map(|k| k.to_string()).collect());
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let mut run = Run::start(cli, "overlap_grid", json!({ "p": p, "keys": keys }), &paths)?;
            let grids = inputs
                .iter()
                .map(|path| Ok(overlap_grid(&load(path, cli.layers)?, *p, &keys)?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut long = LongTable::new("overlap_grid");
            for g in &grids {
                for c in &g.cells {
                    let key = format!("{}|{}", g.model_id, c.class);
                    long.push(c.layer_index, key.clone(), "mean", c.mean);
                    long.push(c.layer_index, key.clone(), "std", c.std);
                    long.push(c.layer_index, key, "count", c.count as f64);
                }
            }
            for c in pool_grids(&grids) {
                long.push("all", c.class.clone(), "mean", c.mean);
                long.push("all", c.class.clone(), "std", c.std);
                long.push("all", c.class.clone(), "count", c.count as f64);
                long.push("all", c.class, "models", c.models as f64);
            }
            run.outputs.long("overlap_grid.csv", &long.rows)?;
            run.finish()
        }
        Study::BalanceTrain(a) => balance(cli, a),
        Study::Alignment { input, r_grid } => {
            let bundle = load(input, cli.layers)?;
            let mut run = Run::start(cli, "alignment", json!({ "r_grid": r_grid }), &[input])?;
            let per = per_layer(&bundle, |l| {
                let s = svd(&l.hidden_f64())?;
                Ok((l.layer_index, router_data_alignment(&l.router.weights_f64(), &s, r_grid)?))
            })?;
            let mut long = LongTable::new("alignment");
            for (idx, pts) in &per {
                for pt in pts {
                    long.push(idx, format!("r={}", pt.r), "aligned", pt.aligned);
                    long.push(idx, format!("r={}", pt.r), "residual", pt.residual);
                }
            }
            run.outputs.long("alignment.csv", &long.rows)?;
            run.finish()
        }
    }
}

/// `μ = mu_norm · e₁`; the noise and the initial router are isotropic, so the
/// direction is immaterial.
pub fn balance_model(a: &BalanceArgs, seed: u64) -> CorrelatedModel {
    let mut mu = vec![0.0; a.dim];
    if let Some(first) = mu.first_mut() {
        *first = a.mu_norm;
    }
    CorrelatedModel {
        mu,
        noise_scale: a.noise,
        noise_kind: NoiseKind::GaussianIid,
        samples: a.samples,
        seed,
    }
}

fn balance(cli: &Cli, a: &BalanceArgs) -> anyhow::Result<()> {
    let model = balance_model(a, cli.seed);
    let config = TrainConfig {
        experts: a.experts,
        init_scale: a.init,
        lr: a.lr,
        steps: a.steps,
        seed: cli.seed,
        batch: match a.batch {
            Some(batch_size) => BatchMode::Micro {
                batch_size,
                resample_shared: false,
            },
            None => BatchMode::Full,
        },
        ..TrainConfig::default()
    };
    let mut run = Run::start(cli, "balance_train", serde_json::to_value(a)?, &[])?;
    let state = train_balance(&model, &config)?;
    let last = state.history.last().expect("history has step 0");
    let mut long = LongTable::new("balance_train");
    for (name, v) in [
        ("initial_suppression", state.initial_suppression().unwrap_or(f64::NAN)),
        ("final_suppression", state.final_suppression().unwrap_or(f64::NAN)),
        ("final_loss", state.loss),
        ("final_linearized_loss", last.linearized_loss),
        ("final_grad_norm", state.grad_norm),
        ("max_logit", state.history.iter().map(|h| h.max_logit).fold(0.0, f64::max)),
        ("steps", state.step as f64),
    ] {
        long.push("all", "", name, v);
    }
    run.outputs.long("balance_train.csv", &long.rows)?;
    run.outputs.csv("balance_history.csv", &state.history)?;
    run.outputs.json("balance_router.json", &state.router)?;
    run.finish()
}
