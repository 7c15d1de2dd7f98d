//! Checks that each instance's tests fail before and pass after its gold
//! patch, including a deliberately broken instance.

use forge_harness::backend::{PhaseOutcome, SandboxBackend, SimBackend, SimProfile};
use forge_harness::eval::validate_instance;
use forge_harness::model::{load_manifest, SizeModel};
use forge_harness::plan::{plan_builds, LayerCache};
use forge_harness::pruner::{prune, AcceptAll};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instances = load_manifest(concat!(env!("CARGO_MANIFEST_DIR"), "/data/demo/manifest.jsonl"))?;
    let mut profile = SimProfile::bundled("table1").expect("bundled");

    // Make the first instance's fail-to-pass test already pass on the base commit.
    let broken = &instances[0];
    let f2p = broken.fail_to_pass[0].clone();
    profile
        .exec_outcomes
        .entry(broken.instance_id.clone())
        .or_default()
        .insert("pre_patch".into(), PhaseOutcome {
            tests: [(f2p, true)].into(),
            seconds: None,
        });

    let report = prune(&instances, &SizeModel::default(), &mut AcceptAll)?;
    let plan = plan_builds(&report, &profile.version_index())?;
    let backend = SimBackend::new(profile);
    let cache = LayerCache::new();
    for img in &plan.images {
        let built = backend.build_image(img, &cache)?;
        for inst in instances.iter().filter(|i| img.spec.assigned_instances.contains(&i.instance_id)) {
            let v = validate_instance(inst, &backend, &built.handle, 120.0);
            if v.valid {
                println!("ok      {}", v.instance_id);
            } else {
                println!("INVALID {}: {}", v.instance_id, v.reasons.join("; "));
            }
        }
    }
    Ok(())
}
