//! The `resbound` command line.
//!
//! Every subcommand writes only inside its `--out` directory and finishes
//! with a report bundle there: `manifest.json` (resolved config, input and
//! output digests), `summary.json`, and one CSV per table.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use resbound::corpus::{
    corpus_files, generate_external_pairs, load_external_corpus, load_phantom_corpus, save_external_corpus,
    save_phantom_corpus, ExternalSpec,
};
use resbound::degrade::{apply_recipe_counted, sample_recipe, DegradationRecipe, DegradeConfig};
use resbound::metrics::{modification_footprint, mse, psnr, MetricThresholds};
use resbound::phantom::{generate_corpus, PhantomSpec, DEFAULT_TARGET_RADIUS};
use resbound::protocol::{
    check_disjoint, external_eval, mc_stability, overlap_analysis, paired_comparison, run_recovery_matrix,
    standard_methods, BoundedRestorer, StabilityClass, DEFAULT_STABILITY_EPSILON,
};
use resbound::report::{
    emit_report, verify_report, write_timing, AggOp, AggSpec, FileDigest, ReportBundle, RunManifest, Table,
};
use resbound::restorer::{
    checkpoint::{header_path, MODEL_BIN}, load_checkpoint, restore_volume, save_checkpoint, BaselineParams, Checkpoint,
};
use resbound::training::{train_on_cases, LossWeights, TrainConfig, TERM_NAMES};
use resbound::volume::{file_pair, load_volume, save_array, save_volume, Region};
use resbound::{Error, ErrorKind, Exec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "RESBOUND_THREADS";

#[derive(Parser, Debug)]
#[command(name = "resbound", version, about = "Residual-bounded slice restoration and conservative-edit evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom corpus, or an external-style degraded/reference corpus.
    Phantom(PhantomArgs),
    /// Apply a degradation recipe to a volume, or sample one first.
    Degrade(DegradeArgs),
    /// Train the bounded restorer on a phantom corpus.
    Train(TrainArgs),
    /// Restore a volume with a trained model.
    Restore(RestoreArgs),
    /// Recovery matrix on held-out phantoms, with paired comparisons.
    EvalMatrix(EvalArgs),
    /// Repeated stochastic degradations per case, classified by gain sign.
    McStability(StabilityArgs),
    /// Meaningful edits split by anatomical region.
    Overlap(EvalArgs),
    /// Whole-volume evaluation on supplied degraded/reference pairs.
    ExternalEval(ExternalArgs),
    /// Recompute digests and summary aggregates of a report bundle.
    VerifyReport(VerifyArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Generator settings (JSON); defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Write noise-only degraded/reference pairs instead of phantom cases.
    #[arg(long)]
    external: bool,
    #[arg(long, default_value_t = DEFAULT_TARGET_RADIUS)]
    target_radius: usize,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["recipe", "sample_seed"]))]
struct DegradeArgs {
    /// Input volume (header path or stem).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Recipe to apply (JSON).
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Sample a recipe with this seed from `--config`.
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Degradation sampler settings (JSON).
    #[arg(long, requires = "sample_seed")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training job (JSON): `{"config": ..., "weights": ...}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `config.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides `config.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `config.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Checkpoint directory or header.
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write r, m, u, and applied-edit volumes under `<out>/maps`.
    #[arg(long)]
    emit_maps: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Evaluation settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Overrides `stability_seeds`.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct ExternalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

/// Settings shared by the evaluation subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub degrade: DegradeConfig,
    pub baselines: BaselineParams,
    pub thresholds: MetricThresholds,
    pub stability_seeds: usize,
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            degrade: DegradeConfig::default(),
            baselines: BaselineParams::default(),
            thresholds: MetricThresholds::default(),
            stability_seeds: 10,
            epsilon: DEFAULT_STABILITY_EPSILON,
        }
    }
}

/// What `train --config` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub config: TrainConfig,
    pub weights: LossWeights,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            }
        }
    }
}

/// Sizes the global pool once per process; thread count never changes
/// output bytes, so a pool that already exists is kept.
fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be at least 1"));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(c: Command) -> CliResult {
    let started = Instant::now();
    let out = match c {
        Command::Phantom(a) => cmd_phantom(a)?,
        Command::Degrade(a) => cmd_degrade(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Restore(a) => cmd_restore(a)?,
        Command::EvalMatrix(a) => cmd_eval_matrix(a)?,
        Command::McStability(a) => cmd_mc_stability(a)?,
        Command::Overlap(a) => cmd_overlap(a)?,
        Command::ExternalEval(a) => cmd_external_eval(a)?,
        Command::VerifyReport(a) => return cmd_verify(a),
    };
    write_timing(&out, started.elapsed().as_secs_f64())?;
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> CliResult<T> {
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Failure::Run(Error::Header { path: p.to_path_buf(), message: e.to_string() }))
}

fn to_value<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn digest(path: &Path) -> CliResult<FileDigest> {
    Ok(FileDigest::of(path, path.display().to_string())?)
}

fn digests<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult<Vec<FileDigest>> {
    paths.into_iter().map(|p| digest(p)).collect()
}

fn volume_inputs(stem: &Path) -> [PathBuf; 2] {
    let (h, r) = file_pair(stem);
    [h, r]
}

fn model_inputs(model: &Path) -> CliResult<Vec<PathBuf>> {
    let h = header_path(model);
    let blob = h.with_file_name(MODEL_BIN);
    Ok(vec![h, blob])
}

fn config_input(config: Option<&Path>) -> Vec<PathBuf> {
    config.map(|p| vec![p.to_path_buf()]).unwrap_or_default()
}

fn relative(out: &Path, files: &[PathBuf]) -> Vec<String> {
    files
        .iter()
        .map(|f| f.strip_prefix(out).expect("written under --out").to_string_lossy().into_owned())
        .collect()
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn cmd_phantom(a: PhantomArgs) -> CliResult<PathBuf> {
    let inputs = digests(&config_input(a.spec.as_deref()))?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    if a.external {
        let mut spec: ExternalSpec = read_config(a.spec.as_deref())?;
        if let Some(s) = a.seed {
            spec.phantom.seed = s;
        }
        let pairs = generate_external_pairs(&spec, a.count, Exec::Parallel)?;
        let written = save_external_corpus(&a.out, Some(&spec), &pairs)?;
        let mut t = Table::new("pairs", &["id", "degraded_psnr_db"]);
        for p in &pairs {
            t.push(vec![p.id.clone(), f(psnr(p.degraded.voxels(), p.reference.voxels(), 100.0)?)]);
        }
        let bundle = ReportBundle {
            manifest: RunManifest::new(
                "phantom",
                json!({ "external": true, "count": a.count, "spec": spec }),
                Some(spec.phantom.seed),
                inputs,
            ),
            tables: vec![t],
            aggregates: vec![
                AggSpec::new("n_pairs", "pairs", "", AggOp::Count),
                AggSpec::new("mean_degraded_psnr_db", "pairs", "degraded_psnr_db", AggOp::Mean),
            ],
            artifacts: relative(&a.out, &written),
        };
        emit_report(bundle, &a.out)?;
    } else {
        let mut spec: PhantomSpec = read_config(a.spec.as_deref())?;
        if let Some(s) = a.seed {
            spec.seed = s;
        }
        let cases = generate_corpus(&spec, a.count, Exec::Parallel)?;
        let written = save_phantom_corpus(&a.out, &spec, a.target_radius, &cases)?;
        let mut t = Table::new("cases", &["case_id", "seed", "has_aneurysm", "target_voxels"]);
        for c in &cases {
            let has = c.labels.count(Region::Aneurysm) > 0;
            let n = resbound::phantom::target_mask(c, a.target_radius).iter().filter(|&&b| b).count();
            t.push(vec![c.case_id.clone(), c.seed.to_string(), has.to_string(), n.to_string()]);
        }
        let bundle = ReportBundle {
            manifest: RunManifest::new(
                "phantom",
                json!({ "external": false, "count": a.count, "target_radius": a.target_radius, "spec": spec }),
                Some(spec.seed),
                inputs,
            ),
            tables: vec![t],
            aggregates: vec![
                AggSpec::new("n_cases", "cases", "", AggOp::Count),
                AggSpec::new("aneurysm_rate", "cases", "has_aneurysm", AggOp::TrueRate),
                AggSpec::new("mean_target_voxels", "cases", "target_voxels", AggOp::Mean),
            ],
            artifacts: relative(&a.out, &written),
        };
        emit_report(bundle, &a.out)?;
    }
    Ok(a.out)
}

fn cmd_degrade(a: DegradeArgs) -> CliResult<PathBuf> {
    let mut in_files = volume_inputs(&a.input).to_vec();
    let (input, _) = load_volume(&a.input)?;
    let (recipe, config) = match (&a.recipe, a.sample_seed) {
        (Some(r), _) => {
            in_files.push(r.clone());
            let recipe: DegradationRecipe = read_json(r)?;
            recipe.validate()?;
            (recipe, json!({ "recipe": r.display().to_string() }))
        }
        (None, Some(seed)) => {
            in_files.extend(config_input(a.config.as_deref()));
            let cfg: DegradeConfig = read_config(a.config.as_deref())?;
            (sample_recipe(&cfg, seed)?, json!({ "sample_seed": seed, "degrade": cfg }))
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let (degraded, clamps) = apply_recipe_counted(&input, &recipe, Exec::Parallel);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_volume(&degraded, &a.out.join("degraded"))?;
    let recipe_path = a.out.join("recipe.json");
    let mut text = serde_json::to_vec_pretty(&recipe).map_err(Error::from)?;
    text.push(b'\n');
    fs::write(&recipe_path, text).map_err(|e| Error::io(&recipe_path, e))?;

    let mut slices = Table::new("slices", &["slice", "mse"]);
    for z in 0..input.depth() {
        slices.push(vec![z.to_string(), f(mse(&degraded.slice(z), &input.slice(z))?)]);
    }
    let mut stages = Table::new("stages", &["index", "stage", "clamped_voxels"]);
    for (i, (s, n)) in recipe.stages.iter().zip(&clamps).enumerate() {
        stages.push(vec![i.to_string(), s.name().into(), n.to_string()]);
    }
    let mut tables = vec![slices];
    let mut aggregates = vec![AggSpec::new("mean_slice_mse", "slices", "mse", AggOp::Mean)];
    if !stages.rows.is_empty() {
        aggregates.push(AggSpec::new("clamped_voxels", "stages", "clamped_voxels", AggOp::Sum));
        tables.push(stages);
    }
    let mut artifacts = relative(&a.out, &volume_inputs(&a.out.join("degraded")));
    artifacts.push("recipe.json".into());
    let bundle = ReportBundle {
        manifest: RunManifest::new("degrade", config, Some(recipe.seed), digests(&in_files)?),
        tables,
        aggregates,
        artifacts,
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

fn cmd_train(a: TrainArgs) -> CliResult<PathBuf> {
    let mut job: TrainJob = read_config(a.config.as_deref())?;
    if let Some(c) = a.corpus {
        job.config.corpus = Some(c);
    }
    if let Some(s) = a.seed {
        job.config.seed = s;
    }
    if let Some(s) = a.steps {
        job.config.steps = s;
    }
    let Some(corpus) = job.config.corpus.clone() else {
        return Err(Failure::Usage("a corpus is required: pass --corpus or set config.corpus".into()));
    };
    let mut in_files = config_input(a.config.as_deref());
    in_files.extend(corpus_files(&corpus)?);
    let inputs = digests(&in_files)?;
    let cases = load_phantom_corpus(&corpus)?;
    let outcome = train_on_cases(&job.config, &job.weights, &cases, Exec::Parallel)?;
    let written = save_checkpoint(&outcome.checkpoint, &a.out)?;

    let mut cols = vec!["step".to_string()];
    for prefix in ["train", "val"] {
        cols.extend(TERM_NAMES.iter().map(|t| format!("{prefix}_{t}")));
        cols.push(format!("{prefix}_total"));
    }
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut log = Table::new("train_log", &col_refs);
    for r in &outcome.log.rows {
        let mut row = vec![r.step.to_string()];
        for part in [&r.train, &r.validation] {
            match part {
                Some(b) => {
                    row.extend(b.terms().iter().map(|&v| f(v)));
                    row.push(f(b.total));
                }
                None => row.extend(std::iter::repeat_n(String::new(), TERM_NAMES.len() + 1)),
            }
        }
        log.push(row);
    }
    let last = job.config.steps.to_string();
    let mut aggregates = vec![
        AggSpec::new("steps", "train_log", "step", AggOp::Max),
        AggSpec::new("mean_train_total", "train_log", "train_total", AggOp::Mean),
        AggSpec::new("first_train_total", "train_log", "train_total", AggOp::Max).filter("step", "0"),
    ];
    if outcome.log.rows.iter().any(|r| r.validation.is_some()) {
        aggregates.push(AggSpec::new("min_val_total", "train_log", "val_total", AggOp::Min));
        aggregates.push(AggSpec::new("final_val_total", "train_log", "val_total", AggOp::Max).filter("step", &last));
        aggregates.push(
            AggSpec::new("final_val_restore", "train_log", "val_restore", AggOp::Max).filter("step", &last),
        );
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("train", to_value(&job)?, Some(job.config.seed), inputs),
        tables: vec![log],
        aggregates,
        artifacts: relative(&a.out, &written),
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

fn load_model(path: &Path) -> CliResult<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

fn cmd_restore(a: RestoreArgs) -> CliResult<PathBuf> {
    let mut in_files = model_inputs(&a.model)?;
    in_files.extend(volume_inputs(&a.input));
    let inputs = digests(&in_files)?;
    let ck = load_model(&a.model)?;
    let (input, _) = load_volume(&a.input)?;
    let r = restore_volume(&ck.params, &input, Exec::Parallel)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    let stem = a.out.join("restored");
    save_volume(&r.restored, &stem)?;
    written.extend(volume_inputs(&stem));
    if a.emit_maps {
        let maps = a.out.join("maps");
        fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
        for (name, v) in [
            ("residual", &r.residual),
            ("edit_map", &r.edit_map),
            ("uncertainty", &r.uncertainty),
            ("applied_edit", &r.applied_edit),
        ] {
            save_array(v, &maps.join(name))?;
            written.extend(volume_inputs(&maps.join(name)));
        }
    }
    let t = MetricThresholds::default();
    let mut slices = Table::new("slices", &["slice", "max_abs_edit", "edit_fraction"]);
    for z in 0..input.depth() {
        let fp = modification_footprint(&r.restored.slice(z), &input.slice(z), t.tau_edit)?;
        slices.push(vec![z.to_string(), f(fp.max_abs), f(fp.fraction)]);
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("restore", json!({ "emit_maps": a.emit_maps, "tau_edit": t.tau_edit }), None, inputs),
        tables: vec![slices],
        aggregates: vec![
            AggSpec::new("max_abs_edit", "slices", "max_abs_edit", AggOp::Max),
            AggSpec::new("mean_edit_fraction", "slices", "edit_fraction", AggOp::Mean),
        ],
        artifacts: relative(&a.out, &written),
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

struct EvalInputs {
    cfg: EvalConfig,
    cases: Vec<resbound::phantom::PhantomCase>,
    model: Checkpoint,
    inputs: Vec<FileDigest>,
}

fn eval_inputs(a: &EvalArgs) -> CliResult<EvalInputs> {
    let mut files = config_input(a.config.as_deref());
    files.extend(model_inputs(&a.model)?);
    files.extend(corpus_files(&a.corpus)?);
    let inputs = digests(&files)?;
    let cfg: EvalConfig = read_config(a.config.as_deref())?;
    let model = load_model(&a.model)?;
    let cases = load_phantom_corpus(&a.corpus)?;
    check_disjoint(&model.train_case_ids, &cases)?;
    Ok(EvalInputs { cfg, cases, model, inputs })
}

const METHOD_COLUMNS: [&str; 9] = [
    "case_id",
    "seed",
    "method",
    "psnr_db",
    "target_gain",
    "footprint_max",
    "footprint_fraction",
    "meaningful_edit_count",
    "iatrogenic",
];

fn cmd_eval_matrix(a: EvalArgs) -> CliResult<PathBuf> {
    let e = eval_inputs(&a)?;
    let methods = standard_methods(&e.model.params, &e.cfg.baselines)?;
    let r = run_recovery_matrix(&e.cases, &methods, &e.cfg.degrade, a.seed, &e.cfg.thresholds, Exec::Parallel)?;

    let mut cases = Table::new("cases", &METHOD_COLUMNS);
    for row in &r.rows {
        let m = &row.metrics;
        cases.push(vec![
            row.case_id.clone(),
            row.seed.to_string(),
            row.method.clone(),
            f(m.psnr_db),
            f(m.target_gain),
            f(m.footprint_max),
            f(m.footprint_fraction),
            m.meaningful_edit_count.to_string(),
            m.iatrogenic.to_string(),
        ]);
    }
    let mut aggregates = vec![AggSpec::new("n_cases", "cases", "", AggOp::Count).filter("method", "bounded")];
    for m in &methods {
        let name = m.name();
        for (agg, col, op) in [
            ("mean_target_gain", "target_gain", AggOp::Mean),
            ("std_target_gain", "target_gain", AggOp::Std),
            ("mean_psnr_db", "psnr_db", AggOp::Mean),
            ("std_psnr_db", "psnr_db", AggOp::Std),
            ("iatrogenic_rate", "iatrogenic", AggOp::TrueRate),
            ("mean_footprint_max", "footprint_max", AggOp::Mean),
            ("mean_footprint_fraction", "footprint_fraction", AggOp::Mean),
        ] {
            aggregates.push(AggSpec::new(format!("{name}.{agg}"), "cases", col, op).filter("method", name));
        }
    }

    let mut paired = Table::new(
        "paired",
        &["case_id", "seed", "baseline", "delta_target_gain", "delta_psnr_db", "outcome", "win"],
    );
    let bounded = r.method_rows("bounded");
    for base in ["degraded", "gaussian", "nlm"] {
        let p = paired_comparison(&bounded, &r.method_rows(base))?;
        for row in &p.rows {
            paired.push(vec![
                row.case_id.clone(),
                row.seed.to_string(),
                base.into(),
                f(row.delta_target_gain),
                f(row.delta_psnr_db),
                row.outcome.name().into(),
                (row.outcome == resbound::protocol::Outcome::Win).to_string(),
            ]);
        }
        let key = format!("bounded_vs_{base}");
        aggregates.push(AggSpec::new(format!("{key}.win_rate_target_gain"), "paired", "win", AggOp::TrueRate).filter("baseline", base));
        aggregates.push(AggSpec::new(format!("{key}.delta_target_gain"), "paired", "delta_target_gain", AggOp::Mean).filter("baseline", base));
        aggregates.push(AggSpec::new(format!("{key}.delta_psnr_db"), "paired", "delta_psnr_db", AggOp::Mean).filter("baseline", base));
        for (o, plural) in [("win", "wins"), ("tie", "ties"), ("loss", "losses")] {
            aggregates.push(
                AggSpec::new(format!("{key}.{plural}"), "paired", "", AggOp::Count).filter("baseline", base).filter("outcome", o),
            );
        }
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("eval-matrix", to_value(&e.cfg)?, Some(a.seed), e.inputs),
        tables: vec![cases, paired],
        aggregates,
        artifacts: Vec::new(),
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

fn cmd_mc_stability(a: StabilityArgs) -> CliResult<PathBuf> {
    let mut e = eval_inputs(&a.eval)?;
    if let Some(n) = a.seeds {
        if n < 2 {
            return Err(Failure::Usage("--seeds must be at least 2".into()));
        }
        e.cfg.stability_seeds = n;
    }
    let restorer = BoundedRestorer { params: e.model.params.clone() };
    let s = mc_stability(
        &e.cases,
        e.cfg.stability_seeds,
        &restorer,
        &e.cfg.degrade,
        a.eval.seed,
        e.cfg.epsilon,
        &e.cfg.thresholds,
        Exec::Parallel,
    )?;
    let mut runs = Table::new("runs", &["case_id", "run", "seed", "target_gain", "psnr_db"]);
    for r in &s.runs {
        runs.push(vec![r.case_id.clone(), r.run.to_string(), r.seed.to_string(), f(r.target_gain), f(r.psnr_db)]);
    }
    let mut cases = Table::new("cases", &["case_id", "class", "mean_gain", "min_gain", "max_gain"]);
    for c in &s.cases {
        let n = c.gains.len() as f64;
        cases.push(vec![
            c.case_id.clone(),
            c.class.name().into(),
            f(c.gains.iter().sum::<f64>() / n),
            f(c.gains.iter().copied().fold(f64::INFINITY, f64::min)),
            f(c.gains.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ]);
    }
    let mut aggregates = vec![
        AggSpec::new("n_cases", "cases", "", AggOp::Count),
        AggSpec::new("n_runs", "runs", "", AggOp::Count),
        AggSpec::new("run_positive_rate", "runs", "target_gain", AggOp::PositiveRate),
        AggSpec::new("mean_target_gain", "runs", "target_gain", AggOp::Mean),
        AggSpec::new("mean_psnr_db", "runs", "psnr_db", AggOp::Mean),
    ];
    for c in StabilityClass::ALL {
        aggregates.push(AggSpec::new(format!("count.{}", c.name()), "cases", "", AggOp::Count).filter("class", c.name()));
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("mc-stability", to_value(&e.cfg)?, Some(a.eval.seed), e.inputs),
        tables: vec![runs, cases],
        aggregates,
        artifacts: Vec::new(),
    };
    emit_report(bundle, &a.eval.out)?;
    Ok(a.eval.out)
}

fn cmd_overlap(a: EvalArgs) -> CliResult<PathBuf> {
    let e = eval_inputs(&a)?;
    let restorer = BoundedRestorer { params: e.model.params.clone() };
    let o = overlap_analysis(&e.cases, &restorer, &e.cfg.degrade, a.seed, &e.cfg.thresholds, Exec::Parallel)?;
    let mut cols = vec!["case_id".to_string(), "seed".into(), "image_pixels".into(), "edit_count".into(), "edit_fraction".into()];
    cols.extend(Region::ALL.iter().map(|r| format!("count_{}", r.name())));
    cols.extend(Region::ALL.iter().map(|r| format!("share_{}", r.name())));
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut cases = Table::new("cases", &col_refs);
    for row in &o.rows {
        let mut cells = vec![
            row.case_id.clone(),
            row.seed.to_string(),
            row.image_pixels.to_string(),
            row.edit_count.to_string(),
            f(row.edit_fraction()),
        ];
        cells.extend(row.region_counts.iter().map(|c| c.to_string()));
        cells.extend(Region::ALL.iter().map(|&r| f(row.share(r))));
        cases.push(cells);
    }
    let mut aggregates = vec![
        AggSpec::new("n_cases", "cases", "", AggOp::Count),
        AggSpec::new("mean_edit_fraction", "cases", "edit_fraction", AggOp::Mean),
    ];
    for r in Region::ALL {
        let col = format!("share_{}", r.name());
        aggregates.push(AggSpec::new(format!("{}.mean_share", r.name()), "cases", &col, AggOp::Mean));
        aggregates.push(AggSpec::new(format!("{}.max_share", r.name()), "cases", &col, AggOp::Max));
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("overlap", to_value(&e.cfg)?, Some(a.seed), e.inputs),
        tables: vec![cases],
        aggregates,
        artifacts: Vec::new(),
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

fn cmd_external_eval(a: ExternalArgs) -> CliResult<PathBuf> {
    let mut files = config_input(a.config.as_deref());
    files.extend(model_inputs(&a.model)?);
    files.extend(corpus_files(&a.corpus)?);
    let inputs = digests(&files)?;
    let cfg: EvalConfig = read_config(a.config.as_deref())?;
    let model = load_model(&a.model)?;
    let pairs = load_external_corpus(&a.corpus)?;
    let methods = standard_methods(&model.params, &cfg.baselines)?;
    let r = external_eval(&pairs, &methods, &cfg.thresholds, Exec::Parallel)?;
    let mut t = Table::new("pairs", &["id", "method", "psnr_db", "psnr_gain_db", "max_modification", "edit_fraction"]);
    for row in &r.rows {
        t.push(vec![
            row.id.clone(),
            row.method.clone(),
            f(row.psnr_db),
            f(row.psnr_gain_db),
            f(row.max_modification),
            f(row.edit_fraction),
        ]);
    }
    let mut aggregates = vec![AggSpec::new("n_pairs", "pairs", "", AggOp::Count).filter("method", "degraded")];
    for m in &methods {
        let name = m.name();
        for (agg, col, op) in [
            ("mean_psnr_db", "psnr_db", AggOp::Mean),
            ("mean_psnr_gain_db", "psnr_gain_db", AggOp::Mean),
            ("psnr_win_rate", "psnr_gain_db", AggOp::PositiveRate),
            ("max_modification", "max_modification", AggOp::Max),
            ("mean_edit_fraction", "edit_fraction", AggOp::Mean),
        ] {
            aggregates.push(AggSpec::new(format!("{name}.{agg}"), "pairs", col, op).filter("method", name));
        }
    }
    let bundle = ReportBundle {
        manifest: RunManifest::new("external-eval", to_value(&cfg)?, None, inputs),
        tables: vec![t],
        aggregates,
        artifacts: Vec::new(),
    };
    emit_report(bundle, &a.out)?;
    Ok(a.out)
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let v = verify_report(&a.input)?;
    if v.is_clean() {
        println!("clean: {}", a.input.display());
        Ok(())
    } else {
        for m in &v.mismatches {
            println!("mismatch: {m}");
        }
        Err(Failure::Run(Error::Report(format!("{} mismatch(es) in {}", v.mismatches.len(), a.input.display()))))
    }
}
