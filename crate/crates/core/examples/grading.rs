//! Evaluates a handful of candidate patches for one demo instance and
//! prints each verdict with its step log.

use forge_harness::backend::{SimBackend, SimProfile};
use forge_harness::eval::{evaluate_logged, EvalOptions};
use forge_harness::model::{load_manifest, SizeModel};
use forge_harness::pipeline::PatchSet;
use forge_harness::plan::{plan_builds, LayerCache};
use forge_harness::pruner::{prune, AcceptAll};
use forge_harness::backend::SandboxBackend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/data/demo");
    let instances = load_manifest(format!("{dir}/manifest.jsonl"))?;
    let patches = PatchSet::load(format!("{dir}/patches.jsonl"))?;
    let profile = SimProfile::bundled("table1").expect("bundled");
    let report = prune(&instances, &SizeModel::default(), &mut AcceptAll)?;
    let plan = plan_builds(&report, &profile.version_index())?;
    let backend = SimBackend::new(profile);
    let cache = LayerCache::new();

    let target = &instances[0];
    let image = plan.image(&report.assignment[&target.instance_id]).expect("planned");
    let built = backend.build_image(image, &cache)?;
    let candidates = std::iter::once(("(none)".to_string(), String::new()))
        .chain(std::iter::once(("gold".to_string(), target.gold_patch.clone())))
        .chain(
            patches
                .entries
                .iter()
                .filter(|e| e.instance_id == target.instance_id)
                .map(|e| (format!("trajectory {}", e.trajectory_idx), e.patch.clone())),
        );
    for (k, (label, patch)) in candidates.enumerate() {
        let opts = EvalOptions {
            trajectory_idx: k as u32,
            ..EvalOptions::default()
        };
        let (verdict, log) = evaluate_logged(target, &patch, &backend, &built.handle, &opts);
        println!("{} {label}: {} reward={} {:.1}s", target.instance_id, verdict.status, verdict.reward, verdict.eval_seconds);
        for step in &log.steps {
            println!("    {:<8} exit={}", step.step, step.result.exit_code);
        }
        for (test, outcome) in &verdict.per_test {
            println!("    {test}: {outcome:?}");
        }
    }
    Ok(())
}
