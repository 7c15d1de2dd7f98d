//! Rollout distribution: fixed round-robin batches with a barrier versus a
//! shared queue that idle workers pull from.
//!
//! Both simulators decide using worker availability only; item durations
//! just advance the clock.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Clock, ImageHandle, SandboxBackend};
use crate::dist::{derive_seed, DurationDist, InvalidDistribution};
use crate::eval::{evaluate, EvalOptions, Verdict, VerdictStatus};
use crate::model::TaskInstance;

/// Trajectories per instance in generated workloads.
pub const ROLLOUTS_PER_INSTANCE: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub instance_id: String,
    pub trajectory_idx: u32,
    pub duration: f64,
}

impl WorkItem {
    pub fn label(&self) -> String {
        format!("{}#{}", self.instance_id, self.trajectory_idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BalancedBatching,
    ProducerConsumer,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BalancedBatching => "balanced_batching",
            Strategy::ProducerConsumer => "producer_consumer",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub item: WorkItem,
    pub start: f64,
    pub finish: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub strategy: Strategy,
    /// Per worker, in execution order.
    pub workers: Vec<Vec<Slot>>,
    pub makespan: f64,
    pub total_idle_seconds: f64,
    pub per_worker_idle: Vec<f64>,
}

impl ScheduleTrace {
    fn from_workers(strategy: Strategy, workers: Vec<Vec<Slot>>) -> Self {
        let makespan = workers
            .iter()
            .flat_map(|w| w.iter().map(|s| s.finish))
            .fold(0.0, f64::max);
        let per_worker_idle: Vec<f64> = workers
            .iter()
            .map(|w| makespan - w.iter().map(|s| s.finish - s.start).sum::<f64>())
            .collect();
        ScheduleTrace {
            strategy,
            total_idle_seconds: per_worker_idle.iter().sum(),
            per_worker_idle,
            makespan,
            workers,
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &WorkItem> {
        self.workers.iter().flatten().map(|s| &s.item)
    }

    /// Checks interval ordering within each worker, the makespan, and that
    /// `input` was executed exactly once.
    pub fn check(&self, input: &[WorkItem]) -> Result<(), String> {
        for (w, slots) in self.workers.iter().enumerate() {
            let mut t = 0.0;
            for s in slots {
                if s.start < t || s.finish < s.start {
                    return Err(format!("worker {w}: {} overlaps or runs backwards", s.item.label()));
                }
                t = s.finish;
            }
        }
        let last = self.workers.iter().flatten().map(|s| s.finish).fold(0.0, f64::max);
        if last != self.makespan {
            return Err(format!("makespan {} differs from last finish {last}", self.makespan));
        }
        let key = |i: &WorkItem| (i.instance_id.clone(), i.trajectory_idx, i.duration.to_bits());
        let mut got: Vec<_> = self.items().map(key).collect();
        let mut want: Vec<_> = input.iter().map(key).collect();
        got.sort();
        want.sort();
        if got != want {
            return Err(format!("executed {} items, expected {}", got.len(), want.len()));
        }
        Ok(())
    }

    /// Same `kind,id,start,end` layout as pipeline traces; `kind` names
    /// the worker.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kind,id,start,end")?;
        for (n, slots) in self.workers.iter().enumerate() {
            for s in slots {
                writeln!(w, "worker{n},{},{:.6},{:.6}", s.item.label(), s.start, s.finish)?;
            }
        }
        Ok(())
    }
}

fn run_back_to_back(subset: impl IntoIterator<Item = WorkItem>) -> Vec<Slot> {
    let mut t = 0.0;
    subset
        .into_iter()
        .map(|item| {
            let start = t;
            t += item.duration;
            Slot { item, start, finish: t }
        })
        .collect()
}

/// Item `i` goes to worker `i % workers`; each worker runs its subset back
/// to back and the batch ends when the slowest worker does.
pub fn balanced_batching(items: &[WorkItem], workers: usize) -> ScheduleTrace {
    assert!(workers >= 1, "need at least one worker");
    let mut subsets = vec![Vec::new(); workers];
    for (i, item) in items.iter().enumerate() {
        subsets[i % workers].push(item.clone());
    }
    ScheduleTrace::from_workers(
        Strategy::BalancedBatching,
        subsets.into_iter().map(run_back_to_back).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PullOptions {
    /// Longest item first. Needs durations up front, so off by default.
    pub longest_first: bool,
}

/// Greedy list scheduling over a shared queue in input order.
pub fn producer_consumer(items: &[WorkItem], workers: usize) -> ScheduleTrace {
    producer_consumer_with(items, workers, PullOptions::default())
}

pub fn producer_consumer_with(items: &[WorkItem], workers: usize, opts: PullOptions) -> ScheduleTrace {
    assert!(workers >= 1, "need at least one worker");
    let mut order: Vec<&WorkItem> = items.iter().collect();
    if opts.longest_first {
        order.sort_by(|a, b| b.duration.total_cmp(&a.duration));
    }
    // (time the worker becomes free, worker index): ties go to the lowest index.
    let mut free: BinaryHeap<Reverse<(u64, usize)>> = (0..workers).map(|w| Reverse((0f64.to_bits(), w))).collect();
    let mut slots = vec![Vec::new(); workers];
    for item in order {
        let Reverse((bits, w)) = free.pop().expect("workers >= 1");
        let start = f64::from_bits(bits);
        let finish = start + item.duration;
        slots[w].push(Slot {
            item: item.clone(),
            start,
            finish,
        });
        free.push(Reverse((finish.to_bits(), w)));
    }
    ScheduleTrace::from_workers(Strategy::ProducerConsumer, slots)
}

/// Reproducible batch of `n_items` items, grouped as
/// [`ROLLOUTS_PER_INSTANCE`] trajectories per instance.
pub fn generate_workload(dist: &DurationDist, n_items: usize, seed: u64) -> Result<Vec<WorkItem>, InvalidDistribution> {
    dist.validate()?;
    if n_items == 0 {
        return Err(InvalidDistribution("workload needs at least one item".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["workload"]));
    Ok((0..n_items)
        .map(|i| WorkItem {
            instance_id: format!("inst-{:04}", i as u32 / ROLLOUTS_PER_INSTANCE),
            trajectory_idx: i as u32 % ROLLOUTS_PER_INSTANCE,
            duration: dist.sample(&mut rng).max(f64::MIN_POSITIVE),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub balanced_makespan: f64,
    pub producer_consumer_makespan: f64,
    pub speedup: f64,
    pub total_duration: f64,
    pub max_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub distribution: DurationDist,
    pub items: usize,
    pub workers: usize,
    pub seed: u64,
    pub trials: Vec<TrialResult>,
    pub mean_speedup: f64,
    pub min_speedup: f64,
    pub max_speedup: f64,
    pub stddev_speedup: f64,
}

/// Runs both strategies on `trials` independent batches; speedup is
/// balanced makespan over producer-consumer makespan.
pub fn compare(
    n_items: usize,
    workers: usize,
    trials: usize,
    dist: &DurationDist,
    seed: u64,
) -> Result<Comparison, InvalidDistribution> {
    if trials == 0 || workers == 0 {
        return Err(InvalidDistribution("trials and workers must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = derive_seed(seed, &["trial", &t.to_string()]);
        let items = generate_workload(dist, n_items, trial_seed)?;
        let bb = balanced_batching(&items, workers).makespan;
        let pc = producer_consumer(&items, workers).makespan;
        results.push(TrialResult {
            seed: trial_seed,
            balanced_makespan: bb,
            producer_consumer_makespan: pc,
            speedup: bb / pc,
            total_duration: items.iter().map(|i| i.duration).sum(),
            max_duration: items.iter().map(|i| i.duration).fold(0.0, f64::max),
        });
    }
    let speedups: Vec<f64> = results.iter().map(|r| r.speedup).collect();
    let n = speedups.len() as f64;
    let mean = speedups.iter().sum::<f64>() / n;
    let var = speedups.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(Comparison {
        distribution: dist.clone(),
        items: n_items,
        workers,
        seed,
        mean_speedup: mean,
        min_speedup: speedups.iter().copied().fold(f64::INFINITY, f64::min),
        max_speedup: speedups.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        stddev_speedup: var.sqrt(),
        trials: results,
    })
}

/// One rollout to grade in integration mode.
#[derive(Debug, Clone)]
pub struct Rollout<'a> {
    pub instance: &'a TaskInstance,
    pub trajectory_idx: u32,
    pub patch: &'a str,
}

/// Drives real evaluations with `workers` threads. Producer-consumer
/// workers take the next rollout through an atomic cursor; balanced
/// workers own fixed round-robin subsets. Durations fill the trace after
/// each evaluation: wall-clock offsets on a real backend, cumulative
/// evaluation seconds per worker on a simulated one.
pub fn run_rollouts(
    rollouts: &[Rollout],
    images: &HashMap<String, ImageHandle>,
    backend: &dyn SandboxBackend,
    workers: usize,
    strategy: Strategy,
    timeout: f64,
    seed: u64,
) -> (Vec<Verdict>, ScheduleTrace) {
    assert!(workers >= 1, "need at least one worker");
    let cursor = AtomicUsize::new(0);
    let verdicts = Mutex::new(Vec::with_capacity(rollouts.len()));
    let t0 = Instant::now();
    let lanes: Vec<Vec<Slot>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (cursor, verdicts) = (&cursor, &verdicts);
                s.spawn(move || {
                    let mut lane = Vec::new();
                    let mut sim_clock = 0.0;
                    let mut next_fixed = w;
                    loop {
                        let idx = match strategy {
                            Strategy::ProducerConsumer => cursor.fetch_add(1, Ordering::Relaxed),
                            Strategy::BalancedBatching => {
                                let i = next_fixed;
                                next_fixed += workers;
                                i
                            }
                        };
                        let Some(r) = rollouts.get(idx) else { break };
                        let started = t0.elapsed().as_secs_f64();
                        let v = match images.get(&r.instance.instance_id) {
                            Some(h) => {
                                let traj = r.trajectory_idx.to_string();
                                let opts = EvalOptions {
                                    timeout,
                                    trajectory_idx: r.trajectory_idx,
                                    workdir_seed: derive_seed(seed, &["workdir", &r.instance.instance_id, &traj]),
                                };
                                evaluate(r.instance, r.patch, backend, h, &opts)
                            }
                            None => Verdict::without_tests(
                                r.instance,
                                r.trajectory_idx,
                                VerdictStatus::BuildError,
                                0.0,
                                "no image for instance",
                            ),
                        };
                        let (start, finish) = match backend.clock() {
                            Clock::Wall => (started, t0.elapsed().as_secs_f64()),
                            Clock::Simulated => {
                                let s = sim_clock;
                                sim_clock += v.eval_seconds;
                                (s, sim_clock)
                            }
                        };
                        lane.push(Slot {
                            item: WorkItem {
                                instance_id: v.instance_id.clone(),
                                trajectory_idx: v.trajectory_idx,
                                duration: finish - start,
                            },
                            start,
                            finish,
                        });
                        verdicts.lock().expect("verdicts poisoned").push(v);
                    }
                    lane
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut verdicts = verdicts.into_inner().expect("verdicts poisoned");
    verdicts.sort_by(|a, b| (&a.instance_id, a.trajectory_idx).cmp(&(&b.instance_id, b.trajectory_idx)));
    (verdicts, ScheduleTrace::from_workers(strategy, lanes))
}
