//! Image dependency pruning.
//!
//! Every instance starts with a dedicated image holding exactly its own
//! dependencies. The pruner then folds compatible images together until a
//! fixed point: two images are compatible when every package they both
//! name has a non-empty constraint intersection. A merged image carries the
//! union of package names, with shared names narrowed to the intersection,
//! so every instance assigned to it still finds an acceptable version.
//!
//! Scan order is deterministic: instances sorted by descending dependency
//! count then `instance_id`; each live image tries every later live image,
//! preferring the partner with the largest byte savings (ties by image id).
//! Passes repeat until one completes without a merge.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{SizeModel, TaskInstance};
use crate::version::Constraint;

pub const DEFAULT_BASE_PROFILE: &str = "slim";

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("no instances to prune")]
    EmptyInput,
    #[error("duplicate instance_id {0:?}")]
    DuplicateId(String),
    #[error("images {0} and {1} are not compatible")]
    IncompatibleImages(String, String),
    #[error("image references unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("image {image_id}: no version of {package} satisfies every assigned instance")]
    Unsatisfiable { image_id: String, package: String },
    #[error("report I/O: {0}")]
    Io(#[from] io::Error),
    #[error("report format: {0}")]
    Format(#[from] serde_json::Error),
}

/// A buildable environment shared by one or more instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub image_id: String,
    pub base_profile: String,
    pub packages: BTreeMap<String, Constraint>,
    pub assigned_instances: BTreeSet<String>,
    pub estimated_bytes: u64,
}

impl ImageSpec {
    pub fn new(
        base_profile: impl Into<String>,
        packages: BTreeMap<String, Constraint>,
        assigned_instances: BTreeSet<String>,
        size_model: &SizeModel,
    ) -> Self {
        let base_profile = base_profile.into();
        let image_id = content_id(&base_profile, &packages, &assigned_instances);
        let estimated_bytes = size_model.image_bytes(packages.keys());
        ImageSpec {
            image_id,
            base_profile,
            packages,
            assigned_instances,
            estimated_bytes,
        }
    }

    /// The dedicated image an instance would get without pruning.
    pub fn for_instance(inst: &TaskInstance, base_profile: &str, size_model: &SizeModel) -> Self {
        let packages = inst
            .deps
            .iter()
            .map(|d| (d.name.clone(), d.constraint.clone()))
            .collect();
        let assigned = BTreeSet::from([inst.instance_id.clone()]);
        ImageSpec::new(base_profile, packages, assigned, size_model)
    }

    /// Whether this image can host `inst`: every dependency is present and
    /// the image's constraint is a subset of the instance's.
    pub fn satisfies(&self, inst: &TaskInstance) -> bool {
        inst.deps.iter().all(|d| {
            self.packages
                .get(&d.name)
                .is_some_and(|c| c.is_subset_of(&d.constraint))
        })
    }

    fn shared_names<'a>(&'a self, other: &'a ImageSpec) -> impl Iterator<Item = &'a String> + 'a {
        let (small, large) = if self.packages.len() <= other.packages.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .packages
            .keys()
            .filter(move |k| large.packages.contains_key(*k))
    }
}

/// `img-` followed by 16 hex chars of SHA-256 over the base profile, the
/// sorted package constraints and the sorted instance set.
pub fn content_id(
    base_profile: &str,
    packages: &BTreeMap<String, Constraint>,
    instances: &BTreeSet<String>,
) -> String {
    let mut h = Sha256::new();
    h.update(base_profile.as_bytes());
    h.update(b"\n");
    for (name, c) in packages {
        h.update(format!("{name} {c}\n").as_bytes());
    }
    h.update(b"--\n");
    for id in instances {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    format!("img-{}", &hex::encode(digest)[..16])
}

/// True iff the images share a base profile and every package name they
/// both carry has a non-empty constraint intersection. Names on one side
/// only never block a merge.
pub fn compatible(a: &ImageSpec, b: &ImageSpec) -> bool {
    a.base_profile == b.base_profile
        && a.shared_names(b)
            .all(|name| a.packages[name].intersect(&b.packages[name]).is_some())
}

pub fn merge(a: &ImageSpec, b: &ImageSpec, size_model: &SizeModel) -> Result<ImageSpec, PruneError> {
    if !compatible(a, b) {
        return Err(PruneError::IncompatibleImages(
            a.image_id.clone(),
            b.image_id.clone(),
        ));
    }
    let mut packages = a.packages.clone();
    for (name, c) in &b.packages {
        let merged = match packages.get(name) {
            Some(existing) => existing
                .intersect(c)
                .expect("compatible images intersect on shared names"),
            None => c.clone(),
        };
        packages.insert(name.clone(), merged);
    }
    let assigned = a
        .assigned_instances
        .union(&b.assigned_instances)
        .cloned()
        .collect();
    Ok(ImageSpec::new(a.base_profile.clone(), packages, assigned, size_model))
}

/// Bytes saved by replacing two images with their merge: the base profile
/// plus every package both already carried.
pub fn merge_savings(a: &ImageSpec, b: &ImageSpec, size_model: &SizeModel) -> u64 {
    size_model.base_bytes + a.shared_names(b).map(|n| size_model.package(n)).sum::<u64>()
}

/// Decides whether a proposed merge may be kept, typically by re-running
/// the absorbed instances' validation against the merged environment.
pub trait MergeValidator {
    fn accept(&mut self, merged: &ImageSpec, absorbed: &[String]) -> bool;
}

impl<F> MergeValidator for F
where
    F: FnMut(&ImageSpec, &[String]) -> bool,
{
    fn accept(&mut self, merged: &ImageSpec, absorbed: &[String]) -> bool {
        self(merged, absorbed)
    }
}

/// Accepts every compatible merge.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl MergeValidator for AcceptAll {
    fn accept(&mut self, _: &ImageSpec, _: &[String]) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneOptions {
    pub base_profile: String,
    /// Minimum number of shared package names before a merge is tried.
    pub min_shared: usize,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            base_profile: DEFAULT_BASE_PROFILE.to_string(),
            min_shared: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub survivor: String,
    pub absorbed: String,
    pub result: String,
    /// Live image count once this merge is applied.
    pub images_after: usize,
    /// Total image bytes (overhead excluded) once this merge is applied.
    pub image_bytes_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedMerge {
    pub survivor: String,
    pub absorbed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub images: Vec<ImageSpec>,
    pub assignment: BTreeMap<String, String>,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub merge_log: Vec<MergeRecord>,
    #[serde(default)]
    pub rejected_merges: Vec<RejectedMerge>,
}

impl PruneReport {
    pub fn image(&self, image_id: &str) -> Option<&ImageSpec> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn image_for(&self, instance_id: &str) -> Option<&ImageSpec> {
        self.assignment.get(instance_id).and_then(|id| self.image(id))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PruneError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PruneError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Sort key used for the candidate scan.
pub fn scan_order(instances: &[TaskInstance]) -> Vec<&TaskInstance> {
    let mut order: Vec<&TaskInstance> = instances.iter().collect();
    order.sort_by(|a, b| {
        b.deps
            .len()
            .cmp(&a.deps.len())
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    order
}

pub fn prune<V: MergeValidator>(
    instances: &[TaskInstance],
    size_model: &SizeModel,
    validator: &mut V,
) -> Result<PruneReport, PruneError> {
    prune_with(instances, size_model, validator, &PruneOptions::default())
}

pub fn prune_with<V: MergeValidator>(
    instances: &[TaskInstance],
    size_model: &SizeModel,
    validator: &mut V,
    opts: &PruneOptions,
) -> Result<PruneReport, PruneError> {
    if instances.is_empty() {
        return Err(PruneError::EmptyInput);
    }
    let mut ids = HashSet::new();
    for inst in instances {
        if !ids.insert(inst.instance_id.as_str()) {
            return Err(PruneError::DuplicateId(inst.instance_id.clone()));
        }
    }

    let overhead = size_model.per_instance_overhead_bytes * instances.len() as u64;
    let mut slots: Vec<Option<ImageSpec>> = scan_order(instances)
        .into_iter()
        .map(|inst| Some(ImageSpec::for_instance(inst, &opts.base_profile, size_model)))
        .collect();
    let bytes_before = slots
        .iter()
        .flatten()
        .map(|img| img.estimated_bytes)
        .sum::<u64>()
        + overhead;

    let mut live = slots.len();
    let mut image_bytes = bytes_before - overhead;
    let mut merge_log = Vec::new();
    let mut rejected_merges = Vec::new();
    let mut rejected: HashSet<(String, String)> = HashSet::new();

    loop {
        let mut merges_this_pass = 0;
        for p in 0..slots.len() {
            while let Some(current) = slots[p].as_ref() {
                let mut candidates: Vec<(u64, &str, usize)> = slots
                    .iter()
                    .enumerate()
                    .skip(p + 1)
                    .filter_map(|(q, slot)| slot.as_ref().map(|img| (q, img)))
                    .filter(|(_, other)| {
                        compatible(current, other)
                            && current.shared_names(other).count() >= opts.min_shared
                            && !rejected.contains(&(current.image_id.clone(), other.image_id.clone()))
                    })
                    .map(|(q, other)| (merge_savings(current, other, size_model), other.image_id.as_str(), q))
                    .collect();
                candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
                let candidates: Vec<(u64, usize)> =
                    candidates.into_iter().map(|(s, _, q)| (s, q)).collect();

                let mut accepted = None;
                for (savings, q) in candidates {
                    let current = slots[p].as_ref().expect("slot p is live");
                    let other = slots[q].as_ref().expect("candidate is live");
                    let merged = merge(current, other, size_model)?;
                    let absorbed: Vec<String> = other.assigned_instances.iter().cloned().collect();
                    if validator.accept(&merged, &absorbed) {
                        accepted = Some((q, merged, savings));
                        break;
                    }
                    rejected.insert((current.image_id.clone(), other.image_id.clone()));
                    rejected_merges.push(RejectedMerge {
                        survivor: current.image_id.clone(),
                        absorbed: other.image_id.clone(),
                    });
                }

                let Some((q, merged, savings)) = accepted else {
                    break;
                };
                let survivor = slots[p].take().expect("slot p is live");
                let absorbed = slots[q].take().expect("candidate is live");
                live -= 1;
                image_bytes -= savings;
                merge_log.push(MergeRecord {
                    survivor: survivor.image_id,
                    absorbed: absorbed.image_id,
                    result: merged.image_id.clone(),
                    images_after: live,
                    image_bytes_after: image_bytes,
                });
                slots[p] = Some(merged);
                merges_this_pass += 1;
            }
        }
        if merges_this_pass == 0 {
            break;
        }
    }

    let images: Vec<ImageSpec> = slots.into_iter().flatten().collect();
    let assignment = images
        .iter()
        .flat_map(|img| {
            img.assigned_instances
                .iter()
                .map(move |id| (id.clone(), img.image_id.clone()))
        })
        .collect();
    let bytes_after = images.iter().map(|i| i.estimated_bytes).sum::<u64>() + overhead;
    debug_assert_eq!(bytes_after, image_bytes + overhead);
    Ok(PruneReport {
        images,
        assignment,
        bytes_before,
        bytes_after,
        merge_log,
        rejected_merges,
    })
}

/// Strips packages no assigned instance needs and narrows the rest to what
/// every assigned instance accepts.
pub fn minimize<'a, F>(image: &ImageSpec, lookup: F, size_model: &SizeModel) -> Result<ImageSpec, PruneError>
where
    F: Fn(&str) -> Option<&'a TaskInstance>,
{
    let mut packages: BTreeMap<String, Constraint> = BTreeMap::new();
    for id in &image.assigned_instances {
        let inst = lookup(id).ok_or_else(|| PruneError::UnknownInstance(id.clone()))?;
        for dep in &inst.deps {
            let current = packages
                .get(&dep.name)
                .or_else(|| image.packages.get(&dep.name))
                .cloned()
                .unwrap_or(Constraint::Any);
            let narrowed = current
                .intersect(&dep.constraint)
                .ok_or_else(|| PruneError::Unsatisfiable {
                    image_id: image.image_id.clone(),
                    package: dep.name.clone(),
                })?;
            packages.insert(dep.name.clone(), narrowed);
        }
    }
    if packages == image.packages {
        return Ok(image.clone());
    }
    Ok(ImageSpec::new(
        image.base_profile.clone(),
        packages,
        image.assigned_instances.clone(),
        size_model,
    ))
}

pub fn index_instances(instances: &[TaskInstance]) -> HashMap<&str, &TaskInstance> {
    instances.iter().map(|i| (i.instance_id.as_str(), i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSummary {
    pub image_count: usize,
    pub instance_count: usize,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub ratio: f64,
}

impl std::fmt::Display for StorageSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "instances={} images={} bytes_before={} bytes_after={} ratio={:.4}",
            self.instance_count, self.image_count, self.bytes_before, self.bytes_after, self.ratio
        )
    }
}

pub fn storage_summary(report: &PruneReport) -> StorageSummary {
    let ratio = if report.bytes_after == 0 {
        1.0
    } else {
        report.bytes_before as f64 / report.bytes_after as f64
    };
    StorageSummary {
        image_count: report.images.len(),
        instance_count: report.assignment.len(),
        bytes_before: report.bytes_before,
        bytes_after: report.bytes_after,
        ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportViolation {
    Unassigned(String),
    DanglingImage { instance_id: String, image_id: String },
    Unsatisfied { instance_id: String, image_id: String, package: String },
    OrphanPackage { image_id: String, package: String },
    EmptyImage(String),
    BytesGrew,
}

/// Checks a report against the instances it was built from: total
/// assignment, every dependency satisfied, and no orphan packages.
pub fn verify_report(report: &PruneReport, instances: &[TaskInstance]) -> Vec<ReportViolation> {
    let mut out = Vec::new();
    let by_id = index_instances(instances);
    if report.bytes_after > report.bytes_before {
        out.push(ReportViolation::BytesGrew);
    }
    for inst in instances {
        let Some(image_id) = report.assignment.get(&inst.instance_id) else {
            out.push(ReportViolation::Unassigned(inst.instance_id.clone()));
            continue;
        };
        let Some(image) = report.image(image_id) else {
            out.push(ReportViolation::DanglingImage {
                instance_id: inst.instance_id.clone(),
                image_id: image_id.clone(),
            });
            continue;
        };
        for dep in &inst.deps {
            let ok = image
                .packages
                .get(&dep.name)
                .is_some_and(|c| c.is_subset_of(&dep.constraint));
            if !ok {
                out.push(ReportViolation::Unsatisfied {
                    instance_id: inst.instance_id.clone(),
                    image_id: image_id.clone(),
                    package: dep.name.clone(),
                });
            }
        }
    }
    for image in &report.images {
        if image.assigned_instances.is_empty() {
            out.push(ReportViolation::EmptyImage(image.image_id.clone()));
        }
        for name in image.packages.keys() {
            let used = image
                .assigned_instances
                .iter()
                .filter_map(|id| by_id.get(id.as_str()))
                .any(|inst| inst.dep(name).is_some());
            if !used {
                out.push(ReportViolation::OrphanPackage {
                    image_id: image.image_id.clone(),
                    package: name.clone(),
                });
            }
        }
    }
    out
}
