//! Command-line driver. Exit codes: 0 success, 1 unexpected failure,
//! 2 input error, 3 container engine unavailable.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::{DockerBackend, SandboxBackend, SimBackend, SimProfile};
use crate::dist::DurationDist;
use crate::eval::{validate_instance, BackendMergeValidator, InstanceValidation};
use crate::model::{load_manifest, SizeModel, TaskInstance};
use crate::pipeline::{build_only, latency_report, run_pipeline, PatchSet, PipelineConfig};
use crate::plan::{plan_builds, BuildPlan, LayerCache, VersionIndex};
use crate::pruner::{prune_with, storage_summary, verify_report, AcceptAll, PruneOptions, PruneReport};
use crate::scheduler::{balanced_batching, compare, generate_workload, producer_consumer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNAVAILABLE: i32 = 3;

const DEFAULT_PROFILE: &str = "table1";
const DEFAULT_CONTAINER_SANDBOXES: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Build, prune and evaluate task environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge per-instance images that share compatible dependencies.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Package size model (JSON). Defaults to built-in sizes.
        size_model: Option<PathBuf>,
        /// Minimum shared packages before two images may merge.
        #[arg(long, default_value_t = 0)]
        min_shared: usize,
    },
    /// Build every image of a prune report.
    Build {
        #[command(flatten)]
        run: RunArgs,
        /// Prune report; pruned on the fly when omitted or `-`.
        report: Option<PathBuf>,
    },
    /// Build and evaluate patches through the streaming pipeline.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Prune report; pruned on the fly when omitted or `-`.
        report: Option<PathBuf>,
        /// Patch file (JSON lines); gold patches when omitted.
        patches: Option<PathBuf>,
    },
    /// Compare balanced batching with producer-consumer rollouts.
    BenchSched(BenchArgs),
    /// Check every instance's tests before and after its gold patch.
    Validate {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    Container,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
    pub backend: BackendKind,
    /// Bundled profile name (table1, sec32, sequential) or a profile path.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub builders: usize,
    #[arg(long, default_value_t = 8)]
    pub evaluators: usize,
    /// Cap on patch application plus tests, in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Overrides the profile seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_sandboxes: Option<usize>,
    /// Leave timestamps out of reports.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Items per batch.
    #[arg(default_value_t = 256)]
    pub items: usize,
    #[arg(long, default_value = "lognormal")]
    pub dist: String,
    /// Comma-separated key=value pairs, e.g. `mu=4.094,sigma=1.0`.
    #[arg(long, default_value = "")]
    pub dist_params: String,
    #[arg(long, default_value_t = 32)]
    pub workers: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

/// Validated settings shared by the environment commands.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub backend: BackendKind,
    pub profile: Option<String>,
    pub builders: usize,
    pub evaluators: usize,
    pub timeout: f64,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub max_sandboxes: Option<usize>,
    pub deterministic: bool,
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Unavailable(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Unavailable(_) => EXIT_UNAVAILABLE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Unavailable(m) | CliError::Failure(m) => m,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> Result<Self, CliError> {
        if a.builders == 0 || a.evaluators == 0 {
            return Err(input("--builders and --evaluators must be at least 1"));
        }
        if !(a.timeout > 0.0 && a.timeout.is_finite()) {
            return Err(input("--timeout must be a positive number of seconds"));
        }
        if a.max_sandboxes == Some(0) {
            return Err(input("--max-sandboxes must be at least 1"));
        }
        fs::create_dir_all(&a.out).map_err(|e| input(format!("output directory {}: {e}", a.out.display())))?;
        Ok(RunConfig {
            manifest: a.manifest.clone(),
            backend: a.backend,
            profile: a.profile.clone(),
            builders: a.builders,
            evaluators: a.evaluators,
            timeout: a.timeout,
            seed: a.seed,
            out: a.out.clone(),
            max_sandboxes: a.max_sandboxes,
            deterministic: a.deterministic,
        })
    }

    fn sim_profile(&self) -> Result<SimProfile, CliError> {
        let name = self.profile.as_deref().unwrap_or(DEFAULT_PROFILE);
        SimProfile::resolve(name).map_err(|e| input(format!("profile {name}: {e}")))
    }

    /// Releases used to resolve version ranges.
    fn version_index(&self) -> Result<VersionIndex, CliError> {
        Ok(self.sim_profile()?.version_index())
    }

    fn backend(&self) -> Result<Box<dyn SandboxBackend>, CliError> {
        match self.backend {
            BackendKind::Sim => {
                let profile = self.sim_profile()?;
                let seed = self.seed.unwrap_or(profile.seed);
                let mut b = SimBackend::new(profile).with_seed(seed);
                if let Some(m) = self.max_sandboxes {
                    b = b.with_max_sandboxes(m);
                }
                Ok(Box::new(b))
            }
            BackendKind::Container => {
                let limit = self.max_sandboxes.unwrap_or(DEFAULT_CONTAINER_SANDBOXES);
                DockerBackend::connect(limit)
                    .map(|b| Box::new(b) as Box<dyn SandboxBackend>)
                    .map_err(|e| CliError::Unavailable(e.to_string()))
            }
        }
    }

    fn pipeline_config(&self, artifact_dir: Option<PathBuf>) -> PipelineConfig {
        PipelineConfig {
            builders: self.builders,
            evaluators: self.evaluators,
            timeout: self.timeout,
            seed: self.seed.unwrap_or(0),
            queue_capacity: None,
            artifact_dir,
        }
    }

    fn instances(&self) -> Result<Vec<TaskInstance>, CliError> {
        load_manifest(&self.manifest).map_err(|e| input(format!("manifest {}: {e}", self.manifest.display())))
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A fresh directory under `out` for this run. The run id hashes the
/// command and its inputs; repeated runs get new `attempt-N` directories.
fn run_dir(out: &Path, command: &str, fingerprint: &serde_json::Value) -> Result<(String, PathBuf), CliError> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(fingerprint.to_string().as_bytes());
    let run_id = format!("{command}-{}", &hex::encode(h.finalize())[..12]);
    let base = out.join(&run_id);
    fs::create_dir_all(&base).map_err(|e| input(format!("{}: {e}", base.display())))?;
    for n in 1.. {
        let dir = base.join(format!("attempt-{n}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((run_id, dir)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(failure(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!("attempt numbers are unbounded")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(value).map_err(failure)?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn write_run_record(dir: &Path, run_id: &str, command: &str, fingerprint: &serde_json::Value, deterministic: bool) -> Result<(), CliError> {
    let mut record = json!({ "run_id": run_id, "command": command, "config": fingerprint });
    if !deterministic {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        record["started_at_unix"] = json!(now);
    }
    write_json(&dir.join("run.json"), &record)
}

fn fingerprint(cfg: &RunConfig, extra: serde_json::Value) -> Result<serde_json::Value, CliError> {
    Ok(json!({
        "manifest": cfg.manifest,
        "manifest_sha256": file_digest(&cfg.manifest)?,
        "backend": cfg.backend,
        "profile": cfg.profile.as_deref().unwrap_or(DEFAULT_PROFILE),
        "builders": cfg.builders,
        "evaluators": cfg.evaluators,
        "timeout": cfg.timeout,
        "seed": cfg.seed,
        "max_sandboxes": cfg.max_sandboxes,
        "extra": extra,
    }))
}

fn prune_instances(
    instances: &[TaskInstance],
    size: &SizeModel,
    opts: &PruneOptions,
    validate_with: Option<(&dyn SandboxBackend, VersionIndex, f64)>,
) -> Result<PruneReport, CliError> {
    match validate_with {
        Some((backend, index, timeout)) => {
            let mut v = BackendMergeValidator::new(backend, instances, index, timeout);
            prune_with(instances, size, &mut v, opts)
        }
        None => prune_with(instances, size, &mut AcceptAll, opts),
    }
    .map_err(input)
}

fn load_or_prune(report: Option<&Path>, instances: &[TaskInstance]) -> Result<PruneReport, CliError> {
    match report.filter(|p| p.as_os_str() != "-") {
        Some(path) => {
            let r = PruneReport::load(path).map_err(|e| input(format!("report {}: {e}", path.display())))?;
            let problems = verify_report(&r, instances);
            if let Some(p) = problems.first() {
                return Err(input(format!(
                    "report {} does not fit the manifest ({} problems, first: {p:?})",
                    path.display(),
                    problems.len()
                )));
            }
            Ok(r)
        }
        None => prune_instances(instances, &SizeModel::default(), &PruneOptions::default(), None),
    }
}

fn plan(cfg: &RunConfig, report: &PruneReport) -> Result<BuildPlan, CliError> {
    plan_builds(report, &cfg.version_index()?).map_err(input)
}

fn cmd_prune<W: Write>(run: &RunArgs, size_model: Option<&Path>, min_shared: usize, out: &mut W) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(run)?;
    let instances = cfg.instances()?;
    let size = match size_model {
        Some(p) => SizeModel::load(p).map_err(|e| input(format!("size model {}: {e}", p.display())))?,
        None => SizeModel::default(),
    };
    let opts = PruneOptions {
        min_shared,
        ..PruneOptions::default()
    };
    // Merges are validated against the simulator only when a profile is named.
    let backend = match (&cfg.profile, cfg.backend) {
        (Some(_), BackendKind::Sim) => Some(cfg.backend()?),
        _ => None,
    };
    let validate_with = match &backend {
        Some(b) => Some((b.as_ref(), cfg.version_index()?, cfg.timeout)),
        None => None,
    };
    let report = prune_instances(&instances, &size, &opts, validate_with)?;

    let size_digest = size_model.map(file_digest).transpose()?;
    let fp = fingerprint(&cfg, json!({ "size_model": size_digest, "min_shared": min_shared, "validated": backend.is_some() }))?;
    let (run_id, dir) = run_dir(&cfg.out, "prune", &fp)?;
    write_run_record(&dir, &run_id, "prune", &fp, cfg.deterministic)?;
    let path = dir.join("prune_report.json");
    report.save(&path).map_err(failure)?;
    let summary = storage_summary(&report);
    write_json(&dir.join("summary.json"), &summary)?;
    writeln!(out, "{summary}").map_err(failure)?;
    writeln!(out, "report={}", path.display()).map_err(failure)?;
    Ok(())
}

fn cmd_build<W: Write>(run: &RunArgs, report: Option<&Path>, out: &mut W) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(run)?;
    let instances = cfg.instances()?;
    let report = load_or_prune(report, &instances)?;
    let plan = plan(&cfg, &report)?;
    let backend = cfg.backend()?;
    let trace = build_only(&plan, backend.as_ref(), cfg.builders).map_err(input)?;

    let fp = fingerprint(&cfg, json!({ "report": report_digest(&report)? }))?;
    let (run_id, dir) = run_dir(&cfg.out, "build", &fp)?;
    write_run_record(&dir, &run_id, "build", &fp, cfg.deterministic)?;
    write_json(&dir.join("trace.json"), &trace)?;
    write_csv(&dir.join("trace.csv"), |w| trace.write_csv(w))?;

    let ok: Vec<f64> = trace.builds.iter().filter(|b| b.ok).map(|b| b.end - b.start).collect();
    let mean = if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    let layers = trace.cache_hits + trace.cache_misses;
    let hit_rate = if layers == 0 { 0.0 } else { trace.cache_hits as f64 / layers as f64 };
    writeln!(
        out,
        "images={} built={} mean_build_s={mean:.2} cache_hit_rate={hit_rate:.4} makespan={:.2}",
        plan.images.len(),
        ok.len(),
        trace.makespan
    )
    .map_err(failure)?;
    for b in trace.builds.iter().filter(|b| !b.ok) {
        writeln!(out, "build_failed={}", b.image_id).map_err(failure)?;
    }
    writeln!(out, "trace={}", dir.join("trace.json").display()).map_err(failure)?;
    Ok(())
}

fn report_digest(report: &PruneReport) -> Result<String, CliError> {
    let body = serde_json::to_vec(report).map_err(failure)?;
    Ok(hex::encode(Sha256::digest(&body)))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(failure)?;
    fs::write(path, buf).map_err(|e| failure(format!("{}: {e}", path.display())))
}

fn cmd_eval<W: Write>(run: &RunArgs, report: Option<&Path>, patches: Option<&Path>, out: &mut W) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(run)?;
    let instances = cfg.instances()?;
    let report = load_or_prune(report, &instances)?;
    let plan = plan(&cfg, &report)?;
    let patch_set = match patches {
        Some(p) => PatchSet::load(p).map_err(|e| input(format!("patches {}: {e}", p.display())))?,
        None => PatchSet::gold(&instances),
    };
    let patches_digest = patches.map(file_digest).transpose()?;
    let fp = fingerprint(&cfg, json!({ "report": report_digest(&report)?, "patches": patches_digest }))?;
    let backend = cfg.backend()?;
    let (run_id, dir) = run_dir(&cfg.out, "eval", &fp)?;
    write_run_record(&dir, &run_id, "eval", &fp, cfg.deterministic)?;

    let pcfg = cfg.pipeline_config(Some(dir.join("artifacts")));
    let (verdicts, trace) = run_pipeline(&plan, &instances, &patch_set, backend.as_ref(), &pcfg).map_err(input)?;
    let latency = latency_report(&trace, &verdicts);

    let mut log = Vec::new();
    for v in &verdicts {
        serde_json::to_writer(&mut log, v).map_err(failure)?;
        log.push(b'\n');
    }
    fs::write(dir.join("verdicts.jsonl"), log).map_err(failure)?;
    write_json(&dir.join("latency.json"), &latency)?;
    write_json(&dir.join("trace.json"), &trace)?;
    write_csv(&dir.join("trace.csv"), |w| trace.write_csv(w))?;

    writeln!(
        out,
        "resolved={}/{} mean_eval_s={:.2} pct_2min={:.1}",
        latency.resolved, latency.verdicts, latency.mean_eval_s, latency.pct_within_2min
    )
    .map_err(failure)?;
    writeln!(out, "verdicts={}", dir.join("verdicts.jsonl").display()).map_err(failure)?;
    Ok(())
}

fn cmd_validate<W: Write>(run: &RunArgs, out: &mut W) -> Result<(), CliError> {
    let cfg = RunConfig::from_args(run)?;
    let instances = cfg.instances()?;
    let report = load_or_prune(None, &instances)?;
    let plan = plan(&cfg, &report)?;
    let backend = cfg.backend()?;
    let cache = LayerCache::new();
    let mut results: Vec<InstanceValidation> = Vec::with_capacity(instances.len());
    for img in &plan.images {
        let built = backend.build_image(img, &cache);
        for id in &img.spec.assigned_instances {
            let inst = instances.iter().find(|i| &i.instance_id == id).expect("plan covers the manifest");
            results.push(match &built {
                Ok(b) => validate_instance(inst, backend.as_ref(), &b.handle, cfg.timeout),
                Err(e) => InstanceValidation {
                    instance_id: id.clone(),
                    valid: false,
                    reasons: vec![format!("BuildError: {e}")],
                },
            });
        }
    }
    results.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let fp = fingerprint(&cfg, json!({}))?;
    let (run_id, dir) = run_dir(&cfg.out, "validate", &fp)?;
    write_run_record(&dir, &run_id, "validate", &fp, cfg.deterministic)?;
    let mut body = Vec::new();
    for r in &results {
        serde_json::to_writer(&mut body, r).map_err(failure)?;
        body.push(b'\n');
    }
    fs::write(dir.join("validation.jsonl"), body).map_err(failure)?;

    let valid = results.iter().filter(|r| r.valid).count();
    writeln!(out, "valid={valid} invalid={}", results.len() - valid).map_err(failure)?;
    for r in results.iter().filter(|r| !r.valid) {
        writeln!(out, "{}: {}", r.instance_id, r.reasons.join("; ")).map_err(failure)?;
    }
    Ok(())
}

fn cmd_bench_sched<W: Write>(a: &BenchArgs, out: &mut W) -> Result<(), CliError> {
    if a.workers == 0 || a.trials == 0 || a.items == 0 {
        return Err(input("items, --workers and --trials must be at least 1"));
    }
    let dist = DurationDist::from_parts(&a.dist, &a.dist_params).map_err(input)?;
    let cmp = compare(a.items, a.workers, a.trials, &dist, a.seed).map_err(input)?;

    fs::create_dir_all(&a.out).map_err(|e| input(format!("output directory {}: {e}", a.out.display())))?;
    let fp = json!({
        "items": a.items,
        "dist": dist,
        "workers": a.workers,
        "trials": a.trials,
        "seed": a.seed,
    });
    let (run_id, dir) = run_dir(&a.out, "bench-sched", &fp)?;
    write_run_record(&dir, &run_id, "bench-sched", &fp, a.deterministic)?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    // Traces of the first trial, for plotting.
    let items = generate_workload(&dist, a.items, cmp.trials[0].seed).map_err(input)?;
    let bb = balanced_batching(&items, a.workers);
    let pc = producer_consumer(&items, a.workers);
    write_csv(&dir.join("balanced_batching.csv"), |w| bb.write_csv(w))?;
    write_csv(&dir.join("producer_consumer.csv"), |w| pc.write_csv(w))?;

    for (i, t) in cmp.trials.iter().enumerate() {
        writeln!(
            out,
            "trial={i} balanced={:.2} producer_consumer={:.2} speedup={:.4}",
            t.balanced_makespan, t.producer_consumer_makespan, t.speedup
        )
        .map_err(failure)?;
    }
    writeln!(
        out,
        "mean_speedup={:.4} min={:.4} max={:.4} stddev={:.4}",
        cmp.mean_speedup, cmp.min_speedup, cmp.max_speedup, cmp.stddev_speedup
    )
    .map_err(failure)?;
    writeln!(out, "report={}", dir.join("comparison.json").display()).map_err(failure)?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Prune {
            run,
            size_model,
            min_shared,
        } => cmd_prune(run, size_model.as_deref(), *min_shared, out),
        Command::Build { run, report } => cmd_build(run, report.as_deref(), out),
        Command::Eval { run, report, patches } => cmd_eval(run, report.as_deref(), patches.as_deref(), out),
        Command::BenchSched(a) => cmd_bench_sched(a, out),
        Command::Validate { run } => cmd_validate(run, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}
