//! Task instances, size model, and line-delimited manifest I/O.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::version::Constraint;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read manifest: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate instance_id {0:?}")]
    DuplicateId(String),
    #[error("instance {0:?} has an empty fail_to_pass list")]
    EmptyFailToPass(String),
    #[error("instance {instance_id:?}: test {test:?} is in both fail_to_pass and pass_to_pass")]
    OverlappingTests { instance_id: String, test: String },
    #[error("instance {instance_id:?}: dependency {name:?} listed twice")]
    DuplicateDependency { instance_id: String, name: String },
    #[error("instance {instance_id:?}: invalid dependency name {name:?}")]
    InvalidDependencyName { instance_id: String, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencySpec {
    pub name: String,
    pub constraint: Constraint,
}

impl DependencySpec {
    pub fn new(name: impl Into<String>, constraint: Constraint) -> Self {
        DependencySpec {
            name: name.into(),
            constraint,
        }
    }
}

/// One executable task: a repository snapshot, what it needs installed,
/// and the tests that define a correct fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub repo: String,
    pub base_commit: String,
    pub deps: Vec<DependencySpec>,
    pub fail_to_pass: Vec<String>,
    pub pass_to_pass: Vec<String>,
    pub gold_patch: String,
    pub test_cmd: String,
    /// Fields this version does not interpret, kept so records survive a
    /// load/save cycle unchanged.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl TaskInstance {
    pub fn all_tests(&self) -> impl Iterator<Item = &String> {
        self.fail_to_pass.iter().chain(self.pass_to_pass.iter())
    }

    pub fn dep(&self, name: &str) -> Option<&Constraint> {
        self.deps
            .iter()
            .find(|d| d.name == name)
            .map(|d| &d.constraint)
    }

    /// Checks the per-record invariants (everything except id uniqueness).
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.fail_to_pass.is_empty() {
            return Err(ManifestError::EmptyFailToPass(self.instance_id.clone()));
        }
        let f2p: HashSet<&str> = self.fail_to_pass.iter().map(String::as_str).collect();
        if let Some(t) = self.pass_to_pass.iter().find(|t| f2p.contains(t.as_str())) {
            return Err(ManifestError::OverlappingTests {
                instance_id: self.instance_id.clone(),
                test: t.clone(),
            });
        }
        let mut seen = HashSet::new();
        for dep in &self.deps {
            if dep.name.is_empty() || dep.name.chars().any(char::is_whitespace) {
                return Err(ManifestError::InvalidDependencyName {
                    instance_id: self.instance_id.clone(),
                    name: dep.name.clone(),
                });
            }
            if !seen.insert(dep.name.as_str()) {
                return Err(ManifestError::DuplicateDependency {
                    instance_id: self.instance_id.clone(),
                    name: dep.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Parses manifest text: one JSON object per line, blank lines skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<TaskInstance>, ManifestError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let inst: TaskInstance =
            serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if !ids.insert(inst.instance_id.clone()) {
            return Err(ManifestError::DuplicateId(inst.instance_id));
        }
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>, ManifestError> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn write_manifest<W: Write>(mut w: W, instances: &[TaskInstance]) -> io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn manifest_to_string(instances: &[TaskInstance]) -> String {
    let mut buf = Vec::new();
    write_manifest(&mut buf, instances).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Byte accounting used to estimate image sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeModel {
    pub base_bytes: u64,
    #[serde(default)]
    pub package_bytes: BTreeMap<String, u64>,
    pub default_package_bytes: u64,
    pub per_instance_overhead_bytes: u64,
}

#[derive(Debug, Error)]
pub enum SizeModelError {
    #[error("failed to read size model: {0}")]
    Io(#[from] io::Error),
    #[error("invalid size model: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("default_package_bytes must be positive")]
    ZeroDefault,
}

pub const MB: u64 = 1_000_000;

impl SizeModel {
    pub fn new(base_bytes: u64, default_package_bytes: u64, per_instance_overhead_bytes: u64) -> Self {
        SizeModel {
            base_bytes,
            package_bytes: BTreeMap::new(),
            default_package_bytes,
            per_instance_overhead_bytes,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SizeModelError> {
        let model: SizeModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.default_package_bytes == 0 {
            return Err(SizeModelError::ZeroDefault);
        }
        Ok(model)
    }

    pub fn package(&self, name: &str) -> u64 {
        self.package_bytes
            .get(name)
            .copied()
            .unwrap_or(self.default_package_bytes)
    }

    /// Base profile plus every named package.
    pub fn image_bytes<'a, I>(&self, packages: I) -> u64
    where
        I: IntoIterator<Item = &'a String>,
    {
        self.base_bytes + packages.into_iter().map(|p| self.package(p)).sum::<u64>()
    }
}

impl Default for SizeModel {
    /// 50 MB slim base, 20 MB per package, 2 MB per-instance layers.
    fn default() -> Self {
        SizeModel::new(50 * MB, 20 * MB, 2 * MB)
    }
}
