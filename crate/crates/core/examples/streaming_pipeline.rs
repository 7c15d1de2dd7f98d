//! Streaming build/evaluate against a strictly sequential baseline on the
//! simulated backend.

use forge_harness::backend::{SimBackend, SimProfile};
use forge_harness::model::{load_manifest, SizeModel};
use forge_harness::pipeline::{latency_report, run_pipeline, sequential_baseline, PatchSet, PipelineConfig};
use forge_harness::plan::plan_builds;
use forge_harness::pruner::{prune, AcceptAll};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instances = load_manifest(concat!(env!("CARGO_MANIFEST_DIR"), "/data/pipeline16/manifest.jsonl"))?;
    let report = prune(&instances, &SizeModel::default(), &mut AcceptAll)?;
    let profile = SimProfile::bundled("table1").expect("bundled");
    let plan = plan_builds(&report, &profile.version_index())?;
    let gold = PatchSet::gold(&instances);

    let backend = SimBackend::new(profile);
    let cfg = PipelineConfig {
        builders: 4,
        evaluators: 8,
        ..PipelineConfig::default()
    };
    let (verdicts, trace) = run_pipeline(&plan, &instances, &gold, &backend, &cfg)?;
    let lat = latency_report(&trace, &verdicts);
    println!(
        "streaming:  makespan {:>6.0}s  builder idle {:.0}%  evaluator idle {:.0}%",
        trace.makespan,
        100.0 * trace.builder_idle_fraction,
        100.0 * trace.evaluator_idle_fraction
    );
    println!("            mean build {:.0}s, mean eval {:.0}s, {} resolved", lat.mean_build_s, lat.mean_eval_s, lat.resolved);

    let seq_profile = SimProfile::bundled("sequential").expect("bundled");
    let seq_plan = plan_builds(&report, &seq_profile.version_index())?;
    let seq = SimBackend::new(seq_profile);
    let (_, seq_trace) = sequential_baseline(&seq_plan, &instances, &gold, &seq, cfg.timeout)?;
    println!("sequential: makespan {:>6.0}s", seq_trace.makespan);
    println!("speedup {:.1}x", seq_trace.makespan / trace.makespan);

    println!("\ntimeline (kind,id,start,end):");
    trace.write_csv(std::io::stdout().lock())?;
    Ok(())
}
