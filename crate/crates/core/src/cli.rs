//! Command-line surface. Every subcommand is a pure function of its input
//! bytes, resolved configuration and seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::Serialize;

use crate::config::{RunConfig, ScenarioConfig};
use crate::decay::{aggregate_queries, bin_equidistant, bin_equidistant_in, fit_decay, BinCentroid, DecayFit};
use crate::error::{Error, Result};
use crate::grpo::{run_scenario, ScenarioSummary, TraceRow};
use crate::io::{self, IngestMode, IngestReport};
use crate::metrics::{
    behavior_distribution, cognitive_metrics, ece_equal_mass, BehaviorDistribution, CalibrationReport,
    CognitiveReport, ConfusionCounts, DecisionRecord,
};
use crate::regions::{
    apply_uncertainty_veto, assign_region, build_profile, emit_manifest, KnowledgeRegion, ManifestRecord,
    NoTags, TagExtractor,
};
use crate::signals::{confidence_from_uncertainty, ResponseSample};
use crate::synthetic::{generate, Corpus};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "metacog", version, about = "Uncertainty, knowledge-region and calibration analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory for reports.
    #[arg(long, global = true, env = "METACOG_OUTPUT_DIR", default_value = ".")]
    pub output_dir: PathBuf,
    /// TOML or JSON config file (a previous report's JSON also works).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Skip malformed input lines instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the exponential decay of accuracy in uncertainty.
    FitDecay(FitDecayArgs),
    /// Partition queries into knowledge regions and emit manifests.
    AssignRegions(RegionArgs),
    /// Decision metrics and calibration from decision records.
    Metrics(MetricsArgs),
    /// Expected calibration error of sample confidences.
    Ece(EceArgs),
    /// Run a trap/escape training scenario on a toy policy.
    Simulate(SimulateArgs),
    /// Generate a seeded synthetic corpus.
    GenSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct FitDecayArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Expected samples per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of uncertainty bins.
    #[arg(long)]
    pub m: Option<usize>,
    /// Fixed binning range as LO,HI.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub u_range: Option<Vec<f64>>,
    /// Weight all centroids equally.
    #[arg(long)]
    pub unweighted: bool,
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mastered_floor: Option<f64>,
    #[arg(long)]
    pub missing_ceiling: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Demote Mastered queries above this uncertainty quantile.
    #[arg(long)]
    pub veto_quantile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Bundled scenario name or scenario file.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// decay, calibrated, miscalibrated, regions or decisions.
    #[arg(long)]
    pub law: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    ingest: Option<&'a IngestReport>,
    warnings: &'a [String],
    result: T,
}

struct Ctx {
    out: PathBuf,
    config: RunConfig,
    warnings: Vec<String>,
}

impl Ctx {
    fn mode(&self) -> IngestMode {
        if self.config.lenient {
            IngestMode::Lenient
        } else {
            IngestMode::Strict
        }
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn report<T: Serialize>(&self, file: &str, command: &str, ingest: Option<&IngestReport>, result: T) -> Result<()> {
        io::write_json(
            &self.path(file),
            &Report {
                tool: TOOL,
                version: VERSION,
                command,
                config: &self.config,
                ingest,
                warnings: &self.warnings,
                result,
            },
        )
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.global.seed.is_some() {
        config.seed = cli.global.seed;
    }
    config.lenient |= cli.global.lenient;
    fs::create_dir_all(&cli.global.output_dir)?;
    let mut ctx = Ctx {
        out: cli.global.output_dir,
        config,
        warnings: Vec::new(),
    };
    match cli.command {
        Command::FitDecay(a) => fit_decay_cmd(&mut ctx, a),
        Command::AssignRegions(a) => regions_cmd(&mut ctx, a),
        Command::Metrics(a) => metrics_cmd(&mut ctx, a),
        Command::Ece(a) => ece_cmd(&mut ctx, a),
        Command::Simulate(a) => simulate_cmd(&mut ctx, a),
        Command::GenSynthetic(a) => synthetic_cmd(&mut ctx, a),
    }
}

#[derive(Serialize)]
struct DecayResult<'a> {
    queries: usize,
    u_range: [f64; 2],
    fit: &'a DecayFit,
}

pub const CENTROID_COLUMNS: [&str; 4] = ["bin_index", "phi", "psi", "count"];

fn fit_decay_cmd(ctx: &mut Ctx, args: FitDecayArgs) -> Result<()> {
    let c = &mut ctx.config.decay;
    if let Some(k) = args.k {
        c.k = k;
    }
    if let Some(m) = args.m {
        c.m = m;
    }
    if let Some(r) = &args.u_range {
        c.u_range = Some([r[0], r[1]]);
    }
    if args.unweighted {
        c.fit.count_weighted = false;
    }
    let c = c.clone();
    let (samples, ingest) = io::ingest_samples(&args.input, ctx.mode())?;
    let aggs = aggregate_queries(&samples)?;
    let off: Vec<&str> = aggs.iter().filter(|a| a.k != c.k).map(|a| a.query_id.as_str()).collect();
    if !off.is_empty() {
        ctx.warn(format!(
            "{} of {} queries have a sample count other than k={} (first: {})",
            off.len(),
            aggs.len(),
            c.k,
            off[0]
        ));
    }
    let centroids = match c.u_range {
        Some([lo, hi]) => bin_equidistant_in(&aggs, c.m, (lo, hi)),
        None => bin_equidistant(&aggs, c.m),
    }
    .map_err(|e| match e {
        Error::DegenerateRange { value } => Error::InsufficientData(format!(
            "every query has mean uncertainty {value}; pass --u-range to bin on a fixed range"
        )),
        other => other,
    })?;
    let fit = fit_decay(&centroids, &c.fit).map_err(|e| match e {
        Error::InsufficientData(msg) => Error::InsufficientData(format!(
            "{msg}; supply queries spread over more uncertainty values or raise --m"
        )),
        other => other,
    })?;
    if !fit.converged {
        ctx.warn(format!("fit stopped after {} iterations without converging", fit.iterations));
    }
    let u_range = c.u_range.unwrap_or_else(|| {
        let lo = aggs.iter().map(|a| a.mean_uncertainty).fold(f64::INFINITY, f64::min);
        let hi = aggs.iter().map(|a| a.mean_uncertainty).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    });
    io::write_csv(&ctx.path("decay_centroids.csv"), &fit.centroids, &CENTROID_COLUMNS)?;
    ctx.report(
        "decay_report.json",
        "fit-decay",
        Some(&ingest),
        DecayResult {
            queries: aggs.len(),
            u_range,
            fit: &fit,
        },
    )?;
    println!(
        "a={:.6} b={:.6} r2={:.6} centroids={}",
        fit.a,
        fit.b,
        fit.r_squared,
        fit.centroids.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct RegionSummary {
    region: KnowledgeRegion,
    count: usize,
    mean_uncertainty: Option<f64>,
}

fn regions_cmd(ctx: &mut Ctx, args: RegionArgs) -> Result<()> {
    let c = &mut ctx.config.regions;
    if let Some(v) = args.mastered_floor {
        c.mastered_floor = v;
    }
    if let Some(v) = args.missing_ceiling {
        c.missing_ceiling = v;
    }
    if let Some(v) = args.tolerance {
        c.tolerance = v;
    }
    if args.veto_quantile.is_some() {
        c.veto_quantile = args.veto_quantile;
    }
    let c = c.clone();
    let thresholds = c.thresholds();
    thresholds.validate()?;
    let (samples, ingest) = io::ingest_samples(&args.input, ctx.mode())?;

    let mut groups: IndexMap<&str, Vec<ResponseSample>> = IndexMap::new();
    for s in &samples {
        groups.entry(s.query_id.as_str()).or_default().push(s.clone());
    }
    let profiles = groups
        .values()
        .map(|g| build_profile(g, None))
        .collect::<Result<Vec<_>>>()?;
    let mut regions: Vec<KnowledgeRegion> = profiles.iter().map(|p| assign_region(p, &thresholds)).collect();
    if let Some(q) = c.veto_quantile {
        apply_uncertainty_veto(&profiles, &mut regions, q)?;
    }
    let tagger = NoTags;
    let records: Vec<ManifestRecord> = profiles
        .iter()
        .zip(&regions)
        .map(|(p, &r)| ManifestRecord::from(&emit_manifest(p, r, &tagger.extract(p), None)))
        .collect();
    io::write_jsonl(&ctx.path("regions.jsonl"), &records)?;

    let summary: Vec<RegionSummary> = [KnowledgeRegion::Mastered, KnowledgeRegion::Confused, KnowledgeRegion::Missing]
        .into_iter()
        .map(|region| {
            let us: Vec<f64> = profiles
                .iter()
                .zip(&regions)
                .filter(|(_, &r)| r == region)
                .map(|(p, _)| p.mean_uncertainty)
                .collect();
            RegionSummary {
                region,
                count: us.len(),
                mean_uncertainty: (!us.is_empty()).then(|| us.iter().sum::<f64>() / us.len() as f64),
            }
        })
        .collect();
    println!(
        "{}",
        summary.iter().map(|s| format!("{}={}", s.region, s.count)).collect::<Vec<_>>().join(" ")
    );
    ctx.report("regions_summary.json", "assign-regions", Some(&ingest), summary)
}

#[derive(Serialize)]
struct MetricsResult {
    cognitive: CognitiveReport,
    distribution: BehaviorDistribution,
    /// Absent when too few graded answers carry an uncertainty.
    calibration: Option<CalibrationReport>,
    calibration_pairs: usize,
}

fn metrics_cmd(ctx: &mut Ctx, args: MetricsArgs) -> Result<()> {
    if let Some(b) = args.bins {
        ctx.config.metrics.bins = b;
    }
    let bins = ctx.config.metrics.bins;
    let (records, ingest) = io::ingest_file::<DecisionRecord>(&args.input, ctx.mode())?;
    let cognitive = cognitive_metrics(ConfusionCounts::from_records(&records))?;
    let pairs: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| Some(((-r.uncertainty?).exp(), r.correct?)))
        .collect();
    let calibration = if pairs.len() >= bins.max(1) {
        Some(ece_equal_mass(&pairs, bins)?)
    } else {
        ctx.warn(format!("{} calibration pairs cannot fill {bins} bins; calibration omitted", pairs.len()));
        None
    };
    let fmt = |x: Option<f64>| x.map_or("absent".to_string(), |v| format!("{v:.4}"));
    println!(
        "AR={} KEI={} CBS={} ECE={}",
        fmt(cognitive.ar),
        fmt(cognitive.kei),
        fmt(cognitive.cbs),
        fmt(calibration.as_ref().map(|c| c.ece))
    );
    let result = MetricsResult {
        distribution: behavior_distribution(&records),
        cognitive,
        calibration,
        calibration_pairs: pairs.len(),
    };
    ctx.report("metrics_report.json", "metrics", Some(&ingest), result)
}

pub const ECE_BIN_COLUMNS: [&str; 3] = ["count", "mean_confidence", "mean_accuracy"];

fn ece_cmd(ctx: &mut Ctx, args: EceArgs) -> Result<()> {
    if let Some(b) = args.bins {
        ctx.config.metrics.bins = b;
    }
    let (samples, ingest) = io::ingest_samples(&args.input, ctx.mode())?;
    let pairs = samples
        .iter()
        .map(|s| Ok((confidence_from_uncertainty(s.uncertainty()?), s.correct)))
        .collect::<Result<Vec<_>>>()?;
    let report = ece_equal_mass(&pairs, ctx.config.metrics.bins)?;
    io::write_csv(&ctx.path("ece_bins.csv"), &report.bins, &ECE_BIN_COLUMNS)?;
    println!("ECE={:.6}", report.ece);
    ctx.report("ece_report.json", "ece", Some(&ingest), report)
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "loss_pg",
    "loss_kl",
    "loss_cal",
    "p_gold",
    "p_refusal",
    "mean_entropy_correct",
    "mean_entropy_incorrect",
    "escape_lhs",
    "escape_rhs",
];

#[derive(Serialize)]
struct TraceCsvRow {
    step: usize,
    loss_pg: f64,
    loss_kl: f64,
    loss_cal: f64,
    p_gold: Option<f64>,
    p_refusal: f64,
    mean_entropy_correct: Option<f64>,
    mean_entropy_incorrect: Option<f64>,
    escape_lhs: f64,
    escape_rhs: f64,
}

impl From<&TraceRow> for TraceCsvRow {
    fn from(r: &TraceRow) -> Self {
        let s = &r.report;
        Self {
            step: r.step,
            loss_pg: s.loss_pg,
            loss_kl: s.loss_kl,
            loss_cal: s.loss_cal,
            p_gold: s.p_gold,
            p_refusal: s.p_refusal,
            mean_entropy_correct: s.mean_entropy_correct,
            mean_entropy_incorrect: s.mean_entropy_incorrect,
            escape_lhs: s.escape_lhs,
            escape_rhs: s.escape_rhs,
        }
    }
}

fn simulate_cmd(ctx: &mut Ctx, args: SimulateArgs) -> Result<()> {
    let sim = &mut ctx.config.simulate;
    if let Some(name) = args.scenario {
        sim.scenario = name;
        sim.inline = None;
    }
    let mut scenario = match sim.inline.take() {
        Some(s) => s,
        None => ScenarioConfig::load(&sim.scenario)?,
    };
    if let Some(steps) = args.steps {
        scenario.train.steps = steps;
    }
    if let Some(seed) = ctx.config.seed {
        scenario.train.rng_seed = seed;
    }
    ctx.config.simulate.inline = Some(scenario.clone());
    let trace = run_scenario(&scenario.env, &scenario.train, scenario.variant, &scenario.verdict)?;
    let rows: Vec<TraceCsvRow> = trace.rows.iter().map(TraceCsvRow::from).collect();
    io::write_csv(&ctx.path("trace.csv"), &rows, &TRACE_COLUMNS)?;
    let s: &ScenarioSummary = &trace.summary;
    println!(
        "{}: verdict={} steps={} p_gold={} p_refusal={:.6}",
        scenario.name,
        serde_json::to_value(s.verdict).map_err(|e| Error::InvalidInput(e.to_string()))?.as_str().unwrap_or("?"),
        s.steps,
        s.final_state.p_gold.map_or("absent".into(), |p| format!("{p:.6}")),
        s.final_state.p_refusal
    );
    ctx.report("summary.json", "simulate", None, s)
}

#[derive(Serialize)]
struct SyntheticResult<'a> {
    law: &'a str,
    seed: u64,
    file: &'a str,
    records: usize,
}

fn synthetic_cmd(ctx: &mut Ctx, args: SyntheticArgs) -> Result<()> {
    let c = &mut ctx.config.synthetic;
    if let Some(v) = args.law {
        c.law = v;
    }
    if let Some(v) = args.n {
        c.n = v;
    }
    if let Some(v) = args.k {
        c.k = v;
    }
    if let Some(v) = args.a {
        c.a = v;
    }
    if let Some(v) = args.b {
        c.b = v;
    }
    let seed = ctx.config.seed.unwrap_or(0);
    let corpus = generate(&ctx.config.synthetic, seed)?;
    let (file, records) = match &corpus {
        Corpus::Samples(s) => {
            io::write_jsonl(&ctx.path("samples.jsonl"), s)?;
            ("samples.jsonl", s.len())
        }
        Corpus::Decisions(d) => {
            io::write_jsonl(&ctx.path("decisions.jsonl"), d)?;
            ("decisions.jsonl", d.len())
        }
    };
    let law = ctx.config.synthetic.law.clone();
    println!("{law}: {records} records -> {}", ctx.path(file).display());
    ctx.report(
        "synthetic_params.json",
        "gen-synthetic",
        None,
        SyntheticResult {
            law: &law,
            seed,
            file,
            records,
        },
    )
}

/// Reads a centroid CSV written by `fit-decay`.
pub fn read_centroids(path: &Path) -> Result<Vec<BinCentroid>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::InvalidInput(e.to_string()))).collect()
}
