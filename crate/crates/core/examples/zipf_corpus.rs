//! Generates the synthetic Zipf corpus and prunes it.
//!
//! `cargo run --example zipf_corpus [-- manifest.jsonl]` also writes the
//! manifest when a path is given.

use std::fs;

use forge_harness::model::{manifest_to_string, SizeModel};
use forge_harness::pruner::{prune, storage_summary, AcceptAll};
use forge_harness::synth::ZipfCorpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = ZipfCorpus::default();
    let instances = corpus.generate();
    if let Some(path) = std::env::args().nth(1) {
        fs::write(&path, manifest_to_string(&instances))?;
        eprintln!("wrote {} instances to {path}", instances.len());
    }

    let report = prune(&instances, &SizeModel::default(), &mut AcceptAll)?;
    println!("{}", storage_summary(&report));
    let mut sizes: Vec<usize> = report.images.iter().map(|i| i.assigned_instances.len()).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    println!("instances per image: {sizes:?}");
    Ok(())
}
