//! Streaming build → evaluate pipeline.
//!
//! Builders and evaluators are independent pools joined by a bounded
//! queue of eligible work. An instance becomes eligible the moment its
//! image is built, so evaluation overlaps with the remaining builds.
//!
//! On a simulated backend the pipeline runs as a discrete-event simulation
//! on the simulated clock; on a wall-clock backend it runs real threads.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BuildOutcome, Clock, ImageHandle, SandboxBackend};
use crate::dist::derive_seed;
use crate::eval::{evaluate_logged, EvalLog, EvalOptions, Verdict, VerdictStatus, DEFAULT_TIMEOUT};
use crate::model::TaskInstance;
use crate::plan::{BuildPlan, LayerCache};

/// Completion threshold used by the latency report.
pub const TWO_MINUTES: f64 = 120.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("instance {0} has no image in the build plan")]
    MissingImage(String),
    #[error("patch for unknown instance {0}")]
    UnknownInstance(String),
    #[error("duplicate patch for {instance_id} trajectory {trajectory_idx}")]
    DuplicatePatch { instance_id: String, trajectory_idx: u32 },
    #[error("patch file line {line}: {reason}")]
    Patches { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One candidate patch for one rollout of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub instance_id: String,
    #[serde(default)]
    pub trajectory_idx: u32,
    pub patch: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchSet {
    pub entries: Vec<PatchEntry>,
}

impl PatchSet {
    /// Parses one JSON object per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: PatchEntry = serde_json::from_str(line).map_err(|e| PipelineError::Patches {
                line: n + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(PatchSet { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        PatchSet::parse(&fs::read_to_string(path)?)
    }

    /// The gold patch of every instance as trajectory 0.
    pub fn gold(instances: &[TaskInstance]) -> Self {
        PatchSet {
            entries: instances
                .iter()
                .map(|i| PatchEntry {
                    instance_id: i.instance_id.clone(),
                    trajectory_idx: 0,
                    patch: i.gold_patch.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub builders: usize,
    pub evaluators: usize,
    pub timeout: f64,
    pub seed: u64,
    /// Defaults to four slots per evaluator.
    pub queue_capacity: Option<usize>,
    /// Where per-evaluation logs go, as `<dir>/<instance>/<trajectory>.json`.
    pub artifact_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            builders: 4,
            evaluators: 8,
            timeout: DEFAULT_TIMEOUT,
            seed: 0,
            queue_capacity: None,
            artifact_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.builders == 0 || self.evaluators == 0 {
            return Err(PipelineError::InvalidConfig("builders and evaluators must be at least 1".into()));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!("timeout must be positive, got {}", self.timeout)));
        }
        if self.queue_capacity == Some(0) {
            return Err(PipelineError::InvalidConfig("queue capacity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.queue_capacity.unwrap_or(4 * self.evaluators)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub image_id: String,
    pub worker: usize,
    pub start: f64,
    pub end: f64,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub trajectory_idx: u32,
    pub image_id: String,
    pub worker: usize,
    pub start: f64,
    pub end: f64,
    pub status: VerdictStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub mode: String,
    pub builders: usize,
    pub evaluators: usize,
    pub builds: Vec<BuildRecord>,
    pub evals: Vec<EvalRecord>,
    pub makespan: f64,
    pub builder_idle_fraction: f64,
    pub evaluator_idle_fraction: f64,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

impl PipelineTrace {
    fn finish(mode: &str, builders: usize, evaluators: usize, mut builds: Vec<BuildRecord>, mut evals: Vec<EvalRecord>) -> Self {
        builds.sort_by(|a, b| a.start.total_cmp(&b.start).then_with(|| a.image_id.cmp(&b.image_id)));
        evals.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then_with(|| (&a.instance_id, a.trajectory_idx).cmp(&(&b.instance_id, b.trajectory_idx)))
        });
        let makespan = builds
            .iter()
            .map(|b| b.end)
            .chain(evals.iter().map(|e| e.end))
            .fold(0.0, f64::max);
        let idle = |workers: usize, busy: f64| {
            if makespan > 0.0 {
                1.0 - busy / (workers as f64 * makespan)
            } else {
                0.0
            }
        };
        let build_busy: f64 = builds.iter().map(|b| b.end - b.start).sum();
        let eval_busy: f64 = evals.iter().map(|e| e.end - e.start).sum();
        PipelineTrace {
            mode: mode.to_string(),
            builders,
            evaluators,
            cache_hits: builds.iter().map(|b| b.cache_hits).sum(),
            cache_misses: builds.iter().map(|b| b.cache_misses).sum(),
            builder_idle_fraction: idle(builders, build_busy),
            evaluator_idle_fraction: idle(evaluators, eval_busy),
            makespan,
            builds,
            evals,
        }
    }

    /// Largest number of builds running at the same instant.
    pub fn max_concurrent_builds(&self) -> usize {
        let spans: Vec<(f64, f64)> = self.builds.iter().map(|b| (b.start, b.end)).collect();
        max_overlap(&spans)
    }

    pub fn max_concurrent_evals(&self) -> usize {
        let spans: Vec<(f64, f64)> = self.evals.iter().map(|e| (e.start, e.end)).collect();
        max_overlap(&spans)
    }

    /// Checks that no evaluation starts before its image finished building
    /// and that the makespan is the last finish time.
    pub fn check(&self) -> Result<(), String> {
        let built: HashMap<&str, f64> = self
            .builds
            .iter()
            .filter(|b| b.ok)
            .map(|b| (b.image_id.as_str(), b.end))
            .collect();
        for e in &self.evals {
            let Some(&ready) = built.get(e.image_id.as_str()) else {
                return Err(format!("{} evaluated without a successful build of {}", e.instance_id, e.image_id));
            };
            if e.start < ready {
                return Err(format!(
                    "{} starts at {} before image {} finished at {}",
                    e.instance_id, e.start, e.image_id, ready
                ));
            }
            if e.end < e.start {
                return Err(format!("{} ends before it starts", e.instance_id));
            }
        }
        let last = self
            .builds
            .iter()
            .map(|b| b.end)
            .chain(self.evals.iter().map(|e| e.end))
            .fold(0.0, f64::max);
        if last != self.makespan {
            return Err(format!("makespan {} differs from last finish {}", self.makespan, last));
        }
        Ok(())
    }

    /// One row per event: `kind,id,start,end`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kind,id,start,end")?;
        for b in &self.builds {
            writeln!(w, "build,{},{:.6},{:.6}", b.image_id, b.start, b.end)?;
        }
        for e in &self.evals {
            writeln!(w, "eval,{}#{},{:.6},{:.6}", e.instance_id, e.trajectory_idx, e.start, e.end)?;
        }
        Ok(())
    }
}

pub(crate) fn max_overlap(spans: &[(f64, f64)]) -> usize {
    // Ends sort before starts at the same instant: back-to-back is not overlap.
    let mut points: Vec<(f64, i32)> = spans
        .iter()
        .filter(|(s, e)| e > s)
        .flat_map(|&(s, e)| [(s, 1), (e, -1)])
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut cur = 0i32;
    let mut best = 0i32;
    for (_, d) in points {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub builds: usize,
    pub evals: usize,
    pub mean_build_s: f64,
    pub mean_eval_s: f64,
    pub pct_within_120s: f64,
    pub pct_within_2min: f64,
    pub resolved: usize,
    pub verdicts: usize,
}

/// Build time is reported separately; percentages cover evaluation time
/// only. Instances that never reached evaluation (`BuildError`) are left
/// out. A timed-out evaluation counts as finishing at the cap.
pub fn latency_report(trace: &PipelineTrace, verdicts: &[Verdict]) -> LatencyReport {
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let build_times: Vec<f64> = trace.builds.iter().filter(|b| b.ok).map(|b| b.end - b.start).collect();
    let eval_times: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.status != VerdictStatus::BuildError)
        .map(|v| v.eval_seconds)
        .collect();
    let pct = |limit: f64| {
        if eval_times.is_empty() {
            100.0
        } else {
            100.0 * eval_times.iter().filter(|&&t| t <= limit).count() as f64 / eval_times.len() as f64
        }
    };
    LatencyReport {
        builds: build_times.len(),
        evals: eval_times.len(),
        mean_build_s: mean(&build_times),
        mean_eval_s: mean(&eval_times),
        pct_within_120s: pct(120.0),
        pct_within_2min: pct(TWO_MINUTES),
        resolved: verdicts.iter().filter(|v| v.status == VerdictStatus::Resolved).count(),
        verdicts: verdicts.len(),
    }
}

#[derive(Debug, Clone)]
struct Unit<'a> {
    instance: &'a TaskInstance,
    trajectory_idx: u32,
    patch: &'a str,
}

/// Groups work by image in plan order. Instances with no patch entry are
/// evaluated once against the unmodified checkout.
fn units_by_image<'a>(
    plan: &BuildPlan,
    instances: &'a [TaskInstance],
    patches: &'a PatchSet,
) -> Result<Vec<Vec<Unit<'a>>>, PipelineError> {
    let mut image_of: HashMap<&str, usize> = HashMap::new();
    for (i, img) in plan.images.iter().enumerate() {
        for a in &img.spec.assigned_instances {
            image_of.insert(a.as_str(), i);
        }
    }
    let by_id: HashMap<&str, &TaskInstance> = instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    let mut seen = BTreeMap::new();
    for p in &patches.entries {
        let inst = by_id
            .get(p.instance_id.as_str())
            .ok_or_else(|| PipelineError::UnknownInstance(p.instance_id.clone()))?;
        if seen.insert((p.instance_id.as_str(), p.trajectory_idx), (*inst, p.patch.as_str())).is_some() {
            return Err(PipelineError::DuplicatePatch {
                instance_id: p.instance_id.clone(),
                trajectory_idx: p.trajectory_idx,
            });
        }
    }
    for inst in instances {
        if !seen.keys().any(|(id, _)| *id == inst.instance_id) {
            seen.insert((inst.instance_id.as_str(), 0), (inst, ""));
        }
    }
    let mut groups = vec![Vec::new(); plan.images.len()];
    // BTreeMap iteration gives (instance_id, trajectory) order within a group.
    for ((id, traj), (inst, patch)) in seen {
        let &img = image_of.get(id).ok_or_else(|| PipelineError::MissingImage(id.to_string()))?;
        groups[img].push(Unit {
            instance: inst,
            trajectory_idx: traj,
            patch,
        });
    }
    Ok(groups)
}

fn eval_options(cfg: &PipelineConfig, unit: &Unit) -> EvalOptions {
    let traj = unit.trajectory_idx.to_string();
    EvalOptions {
        timeout: cfg.timeout,
        trajectory_idx: unit.trajectory_idx,
        workdir_seed: derive_seed(cfg.seed, &["workdir", &unit.instance.instance_id, &traj]),
    }
}

fn build_error(unit: &Unit, err: &BackendError) -> Verdict {
    Verdict::without_tests(unit.instance, unit.trajectory_idx, VerdictStatus::BuildError, 0.0, err.to_string())
}

fn save_artifact(dir: &Path, verdict: &Verdict, log: &EvalLog) -> io::Result<()> {
    let d = dir.join(&verdict.instance_id);
    fs::create_dir_all(&d)?;
    let body = serde_json::json!({ "verdict": verdict, "log": log });
    fs::write(
        d.join(format!("{}.json", verdict.trajectory_idx)),
        serde_json::to_vec_pretty(&body).map_err(io::Error::other)?,
    )
}

fn run_eval(unit: &Unit, handle: &ImageHandle, backend: &dyn SandboxBackend, cfg: &PipelineConfig) -> Verdict {
    let (v, log) = evaluate_logged(unit.instance, unit.patch, backend, handle, &eval_options(cfg, unit));
    if let Some(dir) = &cfg.artifact_dir {
        // Artifacts are a convenience; a failed write must not change the verdict.
        if let Err(e) = save_artifact(dir, &v, &log) {
            eprintln!("warning: could not save artifacts for {}: {e}", v.instance_id);
        }
    }
    v
}

fn sort_verdicts(v: &mut [Verdict]) {
    v.sort_by(|a, b| (&a.instance_id, a.trajectory_idx).cmp(&(&b.instance_id, b.trajectory_idx)));
}

/// Runs the streaming pipeline. Simulated backends run on the simulated
/// clock, wall-clock backends on real threads.
pub fn run_pipeline(
    plan: &BuildPlan,
    instances: &[TaskInstance],
    patches: &PatchSet,
    backend: &dyn SandboxBackend,
    cfg: &PipelineConfig,
) -> Result<(Vec<Verdict>, PipelineTrace), PipelineError> {
    match backend.clock() {
        Clock::Simulated => run_pipeline_simulated(plan, instances, patches, backend, cfg),
        Clock::Wall => run_pipeline_threaded(plan, instances, patches, backend, cfg),
    }
}

#[derive(Debug)]
enum Event {
    BuildDone {
        builder: usize,
        image: usize,
        start: f64,
        outcome: Result<BuildOutcome, BackendError>,
    },
    EvalDone {
        evaluator: usize,
        start: f64,
        image: usize,
        verdict: Verdict,
    },
}

struct EventQueue {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, (f64, Event)>,
    seq: u64,
}

impl EventQueue {
    fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            events: HashMap::new(),
            seq: 0,
        }
    }

    fn push(&mut self, at: f64, e: Event) {
        debug_assert!(at >= 0.0 && at.is_finite());
        // For non-negative finite floats the bit pattern orders like the value.
        self.heap.push(Reverse((at.to_bits(), self.seq)));
        self.events.insert(self.seq, (at, e));
        self.seq += 1;
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse((bits, _))| f64::from_bits(*bits))
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let Reverse((_, seq)) = self.heap.pop()?;
        self.events.remove(&seq)
    }
}

/// Discrete-event run on the backend's simulated clock. Backend calls are
/// made when an operation starts; their reported durations drive the clock.
pub fn run_pipeline_simulated(
    plan: &BuildPlan,
    instances: &[TaskInstance],
    patches: &PatchSet,
    backend: &dyn SandboxBackend,
    cfg: &PipelineConfig,
) -> Result<(Vec<Verdict>, PipelineTrace), PipelineError> {
    cfg.validate()?;
    let mut groups = units_by_image(plan, instances, patches)?;
    let cap = cfg.capacity();
    let cache = LayerCache::new();

    let mut pending: VecDeque<usize> = (0..plan.images.len()).collect();
    let mut handles: Vec<Option<ImageHandle>> = vec![None; plan.images.len()];
    let mut builder_busy = vec![false; cfg.builders];
    // Units a builder could not hand over yet; the builder waits on them.
    let mut held: VecDeque<(usize, usize, Unit)> = VecDeque::new();
    let mut held_by = vec![0usize; cfg.builders];
    let mut queue: VecDeque<(usize, Unit)> = VecDeque::new();
    let mut eval_busy = vec![false; cfg.evaluators];

    let mut events = EventQueue::new();
    let mut verdicts = Vec::new();
    let mut builds = Vec::new();
    let mut evals = Vec::new();
    let mut now = 0.0;

    loop {
        // Dispatch until nothing more can start at `now`.
        loop {
            let mut progressed = false;
            while queue.len() < cap {
                let Some((b, img, unit)) = held.pop_front() else { break };
                held_by[b] -= 1;
                queue.push_back((img, unit));
                progressed = true;
            }
            for b in 0..cfg.builders {
                if builder_busy[b] || held_by[b] > 0 {
                    continue;
                }
                let Some(img) = pending.pop_front() else { break };
                let outcome = backend.build_image(&plan.images[img], &cache);
                let dur = outcome.as_ref().map_or(0.0, |o| o.duration);
                events.push(
                    now + dur,
                    Event::BuildDone {
                        builder: b,
                        image: img,
                        start: now,
                        outcome,
                    },
                );
                builder_busy[b] = true;
                progressed = true;
            }
            for (e, busy) in eval_busy.iter_mut().enumerate() {
                if *busy {
                    continue;
                }
                let Some((img, unit)) = queue.pop_front() else { break };
                let handle = handles[img].as_ref().expect("queued units have built images");
                let verdict = run_eval(&unit, handle, backend, cfg);
                events.push(
                    now + verdict.eval_seconds,
                    Event::EvalDone {
                        evaluator: e,
                        start: now,
                        image: img,
                        verdict,
                    },
                );
                *busy = true;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }

        let Some(t) = events.peek_time() else { break };
        now = t;
        while events.peek_time() == Some(now) {
            let (_, ev) = events.pop().expect("peeked");
            match ev {
                Event::BuildDone {
                    builder,
                    image,
                    start,
                    outcome,
                } => {
                    builder_busy[builder] = false;
                    let units = std::mem::take(&mut groups[image]);
                    let (ok, stats) = match &outcome {
                        Ok(o) => (true, o.cache),
                        Err(_) => (false, Default::default()),
                    };
                    builds.push(BuildRecord {
                        image_id: plan.images[image].image_id().to_string(),
                        worker: builder,
                        start,
                        end: now,
                        cache_hits: stats.hits,
                        cache_misses: stats.misses,
                        ok,
                    });
                    match outcome {
                        Ok(o) => {
                            handles[image] = Some(o.handle);
                            held_by[builder] += units.len();
                            held.extend(units.into_iter().map(|u| (builder, image, u)));
                        }
                        Err(e) => verdicts.extend(units.iter().map(|u| build_error(u, &e))),
                    }
                }
                Event::EvalDone {
                    evaluator,
                    start,
                    image,
                    verdict,
                } => {
                    eval_busy[evaluator] = false;
                    evals.push(EvalRecord {
                        instance_id: verdict.instance_id.clone(),
                        trajectory_idx: verdict.trajectory_idx,
                        image_id: plan.images[image].image_id().to_string(),
                        worker: evaluator,
                        start,
                        end: now,
                        status: verdict.status,
                    });
                    verdicts.push(verdict);
                }
            }
        }
    }

    sort_verdicts(&mut verdicts);
    let trace = PipelineTrace::finish("streaming", cfg.builders, cfg.evaluators, builds, evals);
    Ok((verdicts, trace))
}

/// Thread-pool run measured on the wall clock. The eligible queue is a
/// bounded channel, so builders block when evaluators fall behind.
pub fn run_pipeline_threaded(
    plan: &BuildPlan,
    instances: &[TaskInstance],
    patches: &PatchSet,
    backend: &dyn SandboxBackend,
    cfg: &PipelineConfig,
) -> Result<(Vec<Verdict>, PipelineTrace), PipelineError> {
    cfg.validate()?;
    let groups = units_by_image(plan, instances, patches)?;
    let cache = LayerCache::new();
    let pending: Mutex<VecDeque<(usize, Vec<Unit>)>> = Mutex::new(groups.into_iter().enumerate().collect());
    let verdicts = Mutex::new(Vec::new());
    let builds = Mutex::new(Vec::new());
    let evals = Mutex::new(Vec::new());
    let (tx, rx) = crossbeam_channel::bounded::<(usize, ImageHandle, Unit)>(cfg.capacity());
    let t0 = Instant::now();
    let clock = || t0.elapsed().as_secs_f64();

    thread::scope(|s| {
        for b in 0..cfg.builders {
            let tx = tx.clone();
            let (pending, verdicts, builds, cache) = (&pending, &verdicts, &builds, &cache);
            s.spawn(move || loop {
                let Some((img, units)) = pending.lock().expect("queue poisoned").pop_front() else {
                    break;
                };
                let start = clock();
                let outcome = backend.build_image(&plan.images[img], cache);
                let end = clock();
                let (ok, stats) = match &outcome {
                    Ok(o) => (true, o.cache),
                    Err(_) => (false, Default::default()),
                };
                builds.lock().expect("trace poisoned").push(BuildRecord {
                    image_id: plan.images[img].image_id().to_string(),
                    worker: b,
                    start,
                    end,
                    cache_hits: stats.hits,
                    cache_misses: stats.misses,
                    ok,
                });
                match outcome {
                    Ok(o) => {
                        for u in units {
                            if tx.send((img, o.handle.clone(), u)).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) => verdicts
                        .lock()
                        .expect("verdicts poisoned")
                        .extend(units.iter().map(|u| build_error(u, &e))),
                }
            });
        }
        drop(tx);
        for e in 0..cfg.evaluators {
            let rx = rx.clone();
            let (verdicts, evals) = (&verdicts, &evals);
            s.spawn(move || {
                for (img, handle, unit) in rx.iter() {
                    let start = clock();
                    let v = run_eval(&unit, &handle, backend, cfg);
                    let end = clock();
                    evals.lock().expect("trace poisoned").push(EvalRecord {
                        instance_id: v.instance_id.clone(),
                        trajectory_idx: v.trajectory_idx,
                        image_id: plan.images[img].image_id().to_string(),
                        worker: e,
                        start,
                        end,
                        status: v.status,
                    });
                    verdicts.lock().expect("verdicts poisoned").push(v);
                }
            });
        }
    });

    let mut verdicts = verdicts.into_inner().expect("verdicts poisoned");
    sort_verdicts(&mut verdicts);
    let trace = PipelineTrace::finish(
        "streaming",
        cfg.builders,
        cfg.evaluators,
        builds.into_inner().expect("trace poisoned"),
        evals.into_inner().expect("trace poisoned"),
    );
    Ok((verdicts, trace))
}

/// Baseline without overlap or image reuse: every image is built from
/// scratch, one at a time, then every instance is evaluated one at a time.
/// The makespan is the sum of the reported durations.
pub fn sequential_baseline(
    plan: &BuildPlan,
    instances: &[TaskInstance],
    patches: &PatchSet,
    backend: &dyn SandboxBackend,
    timeout: f64,
) -> Result<(Vec<Verdict>, PipelineTrace), PipelineError> {
    let cfg = PipelineConfig {
        builders: 1,
        evaluators: 1,
        timeout,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    let groups = units_by_image(plan, instances, patches)?;
    let cache = LayerCache::disabled();
    let mut now = 0.0;
    let mut builds = Vec::new();
    let mut outcomes = Vec::with_capacity(plan.images.len());
    for img in &plan.images {
        let outcome = backend.build_image(img, &cache);
        let (ok, dur, stats) = match &outcome {
            Ok(o) => (true, o.duration, o.cache),
            Err(_) => (false, 0.0, Default::default()),
        };
        builds.push(BuildRecord {
            image_id: img.image_id().to_string(),
            worker: 0,
            start: now,
            end: now + dur,
            cache_hits: stats.hits,
            cache_misses: stats.misses,
            ok,
        });
        now += dur;
        outcomes.push(outcome);
    }

    let mut ordered: Vec<(usize, Unit)> = groups
        .into_iter()
        .enumerate()
        .flat_map(|(i, us)| us.into_iter().map(move |u| (i, u)))
        .collect();
    ordered.sort_by(|a, b| {
        (&a.1.instance.instance_id, a.1.trajectory_idx).cmp(&(&b.1.instance.instance_id, b.1.trajectory_idx))
    });
    let mut verdicts = Vec::with_capacity(ordered.len());
    let mut evals = Vec::new();
    for (img, unit) in ordered {
        match &outcomes[img] {
            Err(e) => verdicts.push(build_error(&unit, e)),
            Ok(o) => {
                let v = run_eval(&unit, &o.handle, backend, &cfg);
                evals.push(EvalRecord {
                    instance_id: v.instance_id.clone(),
                    trajectory_idx: v.trajectory_idx,
                    image_id: o.handle.image_id.clone(),
                    worker: 0,
                    start: now,
                    end: now + v.eval_seconds,
                    status: v.status,
                });
                now += v.eval_seconds;
                verdicts.push(v);
            }
        }
    }
    sort_verdicts(&mut verdicts);
    Ok((verdicts, PipelineTrace::finish("sequential", 1, 1, builds, evals)))
}

/// Builds every image through the builder pool without evaluating.
pub fn build_only(plan: &BuildPlan, backend: &dyn SandboxBackend, builders: usize) -> Result<PipelineTrace, PipelineError> {
    let cfg = PipelineConfig {
        builders,
        evaluators: 1,
        ..PipelineConfig::default()
    };
    let (_, mut trace) = run_pipeline(plan, &[], &PatchSet::default(), backend, &cfg)?;
    trace.mode = "build".into();
    trace.evaluators = 0;
    trace.evaluator_idle_fraction = 0.0;
    Ok(trace)
}
