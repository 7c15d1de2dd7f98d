//! Build planning: concrete version resolution, content-addressed layer
//! keys, and the shared layer cache.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pruner::{ImageSpec, PruneReport};
use crate::version::{Constraint, Version};

/// Identity of a layer chain prefix: the base profile plus an ordered run
/// of resolved packages.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerKey(pub String);

impl LayerKey {
    pub fn base(base_profile: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"base\0");
        h.update(base_profile.as_bytes());
        LayerKey(hex::encode(h.finalize()))
    }

    pub fn extend(&self, name: &str, version: &Version) -> Self {
        let mut h = Sha256::new();
        h.update(self.0.as_bytes());
        h.update(b"\0");
        h.update(name.as_bytes());
        h.update(b"==");
        h.update(version.to_string().as_bytes());
        LayerKey(hex::encode(h.finalize()))
    }

    pub fn short(&self) -> &str {
        &self.0[..12]
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Known releases per package, used to pick concrete versions.
pub type VersionIndex = BTreeMap<String, BTreeSet<Version>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPackage {
    pub name: String,
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedImage {
    pub spec: ImageSpec,
    /// In layer order (package name order).
    pub resolved: Vec<ResolvedPackage>,
    /// One key per package layer; the base layer is the chain root and is
    /// not listed.
    pub layers: Vec<LayerKey>,
}

impl PlannedImage {
    pub fn image_id(&self) -> &str {
        &self.spec.image_id
    }

    /// Key of the final layer, identifying the finished image content.
    pub fn content_key(&self) -> LayerKey {
        self.layers
            .last()
            .cloned()
            .unwrap_or_else(|| LayerKey::base(&self.spec.base_profile))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildPlan {
    pub images: Vec<PlannedImage>,
}

impl BuildPlan {
    pub fn unique_layers(&self) -> usize {
        self.images
            .iter()
            .flat_map(|i| i.layers.iter())
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn image(&self, image_id: &str) -> Option<&PlannedImage> {
        self.images.iter().find(|i| i.image_id() == image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("image {image_id}: no known version of {package} satisfies {constraint}")]
    UnresolvableConstraint {
        image_id: String,
        package: String,
        constraint: Constraint,
    },
}

/// Resolves every package to the highest known version its constraint
/// allows and orders images so shared layer prefixes are built first.
///
/// The known universe for a package is `index` plus every exact pin that
/// appears in the report.
pub fn plan_builds(report: &PruneReport, index: &VersionIndex) -> Result<BuildPlan, PlanError> {
    let mut universe = index.clone();
    for img in &report.images {
        for (name, c) in &img.packages {
            if let Constraint::Exact(v) = c {
                universe.entry(name.clone()).or_default().insert(v.clone());
            }
        }
    }

    let images = report
        .images
        .iter()
        .map(|spec| plan_image(spec, &universe))
        .collect::<Result<Vec<_>, _>>()?;
    let mut images = images;
    // Lexicographic order over (name, version) chains puts every prefix
    // before its extensions and keeps shared prefixes adjacent.
    images.sort_by(|a, b| {
        let ka = (&a.spec.base_profile, chain(a));
        let kb = (&b.spec.base_profile, chain(b));
        ka.cmp(&kb).then_with(|| a.image_id().cmp(b.image_id()))
    });
    Ok(BuildPlan { images })
}

/// Resolves a single image against `index` (exact pins in the image
/// count as known releases).
pub fn plan_image(spec: &ImageSpec, index: &VersionIndex) -> Result<PlannedImage, PlanError> {
    let mut resolved = Vec::with_capacity(spec.packages.len());
    let mut layers = Vec::with_capacity(spec.packages.len());
    let mut key = LayerKey::base(&spec.base_profile);
    for (name, c) in &spec.packages {
        let pinned = match c {
            Constraint::Exact(v) => Some(v),
            _ => None,
        };
        let known = index.get(name).into_iter().flatten().chain(pinned);
        let version = c
            .max_satisfying(known)
            .ok_or_else(|| PlanError::UnresolvableConstraint {
                image_id: spec.image_id.clone(),
                package: name.clone(),
                constraint: c.clone(),
            })?
            .clone();
        key = key.extend(name, &version);
        layers.push(key.clone());
        resolved.push(ResolvedPackage {
            name: name.clone(),
            version,
        });
    }
    Ok(PlannedImage {
        spec: spec.clone(),
        resolved,
        layers,
    })
}

fn chain(img: &PlannedImage) -> Vec<(&str, &Version)> {
    img.resolved.iter().map(|r| (r.name.as_str(), &r.version)).collect()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Thread-safe set of layers already built.
#[derive(Debug)]
pub struct LayerCache {
    enabled: bool,
    inner: Mutex<(HashSet<LayerKey>, CacheStats)>,
}

impl Default for LayerCache {
    fn default() -> Self {
        LayerCache::new()
    }
}

impl LayerCache {
    pub fn new() -> Self {
        LayerCache {
            enabled: true,
            inner: Mutex::new((HashSet::new(), CacheStats::default())),
        }
    }

    /// A cache that never hits; every build starts from scratch.
    pub fn disabled() -> Self {
        LayerCache {
            enabled: false,
            ..LayerCache::new()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Counts which of `layers` are already present and records the rest
    /// as built.
    pub fn claim(&self, layers: &[LayerKey]) -> CacheStats {
        let mut guard = self.inner.lock().expect("layer cache poisoned");
        let (set, totals) = &mut *guard;
        let mut stats = CacheStats::default();
        for key in layers {
            if self.enabled && set.contains(key) {
                stats.hits += 1;
            } else {
                stats.misses += 1;
                if self.enabled {
                    set.insert(key.clone());
                }
            }
        }
        totals.hits += stats.hits;
        totals.misses += stats.misses;
        stats
    }

    pub fn contains(&self, key: &LayerKey) -> bool {
        self.inner.lock().expect("layer cache poisoned").0.contains(key)
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.lock().expect("layer cache poisoned").1
    }
}
