//! Balanced batching against producer-consumer pulling on long-tailed
//! rollout durations.
//!
//! `cargo run --example rollout_scheduling [-- workers]`

use forge_harness::dist::DurationDist;
use forge_harness::scheduler::{balanced_batching, compare, generate_workload, producer_consumer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workers: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(32);
    let dist = DurationDist::LogNormal {
        mu: 60f64.ln(),
        sigma: 1.0,
    };

    let items = generate_workload(&dist, 256, 7)?;
    let bb = balanced_batching(&items, workers);
    let pc = producer_consumer(&items, workers);
    println!("one batch of {} rollouts on {workers} workers:", items.len());
    for t in [&bb, &pc] {
        println!(
            "  {:<18} makespan {:>7.1}s  idle {:>8.1} worker-s",
            t.strategy.as_str(),
            t.makespan,
            t.total_idle_seconds
        );
    }

    for (name, d) in [
        ("lognormal", dist),
        ("pareto", DurationDist::Pareto { scale: 20.0, shape: 1.5 }),
        ("uniform", DurationDist::Uniform { low: 30.0, high: 90.0 }),
        ("constant", DurationDist::Constant { value: 60.0 }),
    ] {
        let c = compare(256, workers, 20, &d, 7)?;
        println!(
            "{name:<10} mean speedup {:.3} (min {:.3}, max {:.3})",
            c.mean_speedup, c.min_speedup, c.max_speedup
        );
    }
    Ok(())
}
