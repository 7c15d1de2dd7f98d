//! Prunes the demo manifest and shows which instances share an image.
//!
//! `cargo run --example prune_manifest [-- manifest.jsonl]`

use forge_harness::model::{load_manifest, SizeModel};
use forge_harness::pruner::{prune, storage_summary, AcceptAll};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/demo/manifest.jsonl").into());
    let instances = load_manifest(&path)?;
    let size = SizeModel::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/size_model.json"))?;
    let report = prune(&instances, &size, &mut AcceptAll)?;

    for img in &report.images {
        let pkgs: Vec<String> = img.packages.iter().map(|(n, c)| format!("{n}{c}")).collect();
        println!("{} ({} MB)", img.image_id, img.estimated_bytes / 1_000_000);
        println!("  packages:  {}", pkgs.join(" "));
        let ids: Vec<&str> = img.assigned_instances.iter().map(String::as_str).collect();
        println!("  instances: {}", ids.join(" "));
    }
    println!("{} merges", report.merge_log.len());
    println!("{}", storage_summary(&report));
    Ok(())
}
