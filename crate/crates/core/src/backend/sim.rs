//! Deterministic simulated engine.
//!
//! Durations come from a [`SimProfile`]; every random draw is seeded from
//! the profile seed and the identity of the operation (instance, phase,
//! trajectory), never from call order, so any schedule over the same work
//! yields the same results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BackendError, BuildOutcome, Clock, ExecKind, ExecRequest, ExecResult, ImageHandle, Phase,
    SandboxBackend, SandboxHandle, TIMEOUT_EXIT_CODE,
};
use crate::dist::{derive_seed, DurationDist};
use crate::eval::format_test_line;
use crate::patch::{apply_to_tree, Patch};
use crate::plan::{LayerCache, PlannedImage, VersionIndex};
use crate::version::Version;

const SHELL_SECONDS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid profile: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub name: String,
    /// Images of at least this many estimated bytes belong to the class.
    pub min_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseOutcome {
    /// Per-test pass (`true`) or fail. Tests not listed follow the phase
    /// default.
    #[serde(default)]
    pub tests: BTreeMap<String, bool>,
    /// Overrides the sampled test duration.
    #[serde(default)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultRates {
    #[serde(default)]
    pub infra: f64,
    #[serde(default)]
    pub timeout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bases")]
    pub base_profiles: Vec<String>,
    /// Cold build time keyed by image id, size-class name, or `default`.
    pub build_seconds: BTreeMap<String, f64>,
    #[serde(default)]
    pub size_classes: Vec<SizeClass>,
    pub cache_hit_build_seconds: f64,
    pub apply_seconds: f64,
    pub test_seconds: DurationDist,
    /// instance id -> phase name -> outcome.
    #[serde(default)]
    pub exec_outcomes: BTreeMap<String, BTreeMap<String, PhaseOutcome>>,
    /// Packages whose installation fails at build time.
    #[serde(default)]
    pub broken_packages: BTreeSet<String>,
    /// Instance pairs that break when placed in the same image.
    #[serde(default)]
    pub merge_conflicts: Vec<[String; 2]>,
    #[serde(default)]
    pub known_versions: BTreeMap<String, Vec<Version>>,
    /// instance id -> repository files present after checkout.
    #[serde(default)]
    pub files: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub faults: FaultRates,
    #[serde(default = "default_max_sandboxes")]
    pub max_live_sandboxes: usize,
}

fn default_bases() -> Vec<String> {
    vec![crate::pruner::DEFAULT_BASE_PROFILE.to_string()]
}

fn default_max_sandboxes() -> usize {
    64
}

const BUNDLED: [(&str, &str); 3] = [
    ("table1", include_str!("../../data/profiles/table1.toml")),
    ("sec32", include_str!("../../data/profiles/sec32.toml")),
    ("sequential", include_str!("../../data/profiles/sequential.toml")),
];

impl SimProfile {
    pub fn from_toml(text: &str) -> Result<Self, ProfileError> {
        let p: SimProfile = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        SimProfile::from_toml(&fs::read_to_string(path)?)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Option<SimProfile> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| SimProfile::from_toml(text).expect("bundled profiles are valid"))
    }

    /// A bundled profile name, or a path to a profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match SimProfile::bundled(name_or_path) {
            Some(p) => Ok(p),
            None => SimProfile::load(name_or_path),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::Invalid(m));
        if !self.build_seconds.contains_key("default") {
            return bad("build_seconds needs a `default` entry".into());
        }
        for (k, &v) in &self.build_seconds {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("build_seconds.{k} must be positive"));
            }
        }
        for (name, v) in [
            ("cache_hit_build_seconds", self.cache_hit_build_seconds),
            ("apply_seconds", self.apply_seconds),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        self.test_seconds
            .validate()
            .map_err(|e| ProfileError::Invalid(format!("test_seconds: {e}")))?;
        for (inst, phases) in &self.exec_outcomes {
            for (phase, outcome) in phases {
                if Phase::parse(phase).is_none() {
                    return bad(format!("exec_outcomes.{inst}: unknown phase {phase:?}"));
                }
                if outcome.seconds.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                    return bad(format!("exec_outcomes.{inst}.{phase}.seconds must be positive"));
                }
            }
        }
        let rates = [self.faults.infra, self.faults.timeout];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 {
            return bad("fault rates must lie in [0, 1] and sum to at most 1".into());
        }
        if self.max_live_sandboxes == 0 {
            return bad("max_live_sandboxes must be at least 1".into());
        }
        Ok(())
    }

    pub fn version_index(&self) -> VersionIndex {
        self.known_versions
            .iter()
            .map(|(k, vs)| (k.clone(), vs.iter().cloned().collect()))
            .collect()
    }

    /// Cold build time for an image: exact id, then size class, then default.
    pub fn cold_build_seconds(&self, image: &PlannedImage) -> f64 {
        if let Some(&s) = self.build_seconds.get(image.image_id()) {
            return s;
        }
        let class = self
            .size_classes
            .iter()
            .filter(|c| image.spec.estimated_bytes >= c.min_bytes)
            .max_by_key(|c| c.min_bytes);
        class
            .and_then(|c| self.build_seconds.get(&c.name))
            .copied()
            .unwrap_or(self.build_seconds["default"])
    }

    pub fn conflicts(&self, a: &str, b: &str) -> bool {
        self.merge_conflicts
            .iter()
            .any(|[x, y]| (x == a && y == b) || (x == b && y == a))
    }

    fn outcome(&self, instance_id: &str, phase: Phase) -> Option<&PhaseOutcome> {
        self.exec_outcomes.get(instance_id)?.get(phase.as_str())
    }
}

#[derive(Debug, Default)]
struct SimState {
    live: HashMap<String, BTreeMap<String, String>>,
    created: u64,
    peak: usize,
}

/// Simulated backend: no real work, durations from the profile.
#[derive(Debug)]
pub struct SimBackend {
    profile: SimProfile,
    max_live: usize,
    state: Mutex<SimState>,
    freed: Condvar,
}

impl SimBackend {
    pub fn new(profile: SimProfile) -> Self {
        let max_live = profile.max_live_sandboxes;
        SimBackend {
            profile,
            max_live,
            state: Mutex::new(SimState::default()),
            freed: Condvar::new(),
        }
    }

    pub fn with_max_sandboxes(mut self, max_live: usize) -> Self {
        assert!(max_live >= 1, "need at least one sandbox slot");
        self.max_live = max_live;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.profile.seed = seed;
        self
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    fn run_shell(&self, fs: &mut BTreeMap<String, String>, cmd: &str) -> (i64, String, String, f64) {
        let cmd = cmd.trim();
        let (word, rest) = cmd.split_once(' ').unwrap_or((cmd, ""));
        let rest = rest.trim();
        match word {
            "true" | "" => (0, String::new(), String::new(), SHELL_SECONDS),
            "false" => (1, String::new(), String::new(), SHELL_SECONDS),
            "sleep" => match rest.parse::<f64>() {
                Ok(s) if s >= 0.0 => (0, String::new(), String::new(), s.max(SHELL_SECONDS)),
                _ => (2, String::new(), format!("sleep: invalid time {rest:?}\n"), SHELL_SECONDS),
            },
            "echo" => match rest.split_once('>') {
                Some((text, path)) => {
                    fs.insert(path.trim().to_string(), format!("{}\n", text.trim()));
                    (0, String::new(), String::new(), SHELL_SECONDS)
                }
                None => (0, format!("{rest}\n"), String::new(), SHELL_SECONDS),
            },
            "cat" => match fs.get(rest) {
                Some(c) => (0, c.clone(), String::new(), SHELL_SECONDS),
                None => (1, String::new(), format!("cat: {rest}: No such file or directory\n"), SHELL_SECONDS),
            },
            other => (127, String::new(), format!("{other}: command not found\n"), SHELL_SECONDS),
        }
    }

    fn run_tests(
        &self,
        instance_id: &str,
        phase: Phase,
        trajectory_idx: u32,
        fail_to_pass: &[String],
        pass_to_pass: &[String],
        timeout: f64,
    ) -> Result<(i64, String, f64), BackendError> {
        let traj = trajectory_idx.to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.profile.seed,
            &[instance_id, phase.as_str(), &traj],
        ));
        let fault: f64 = rng.random();
        let sampled = self.profile.test_seconds.sample(&mut rng);
        if fault < self.profile.faults.infra {
            return Err(BackendError::Infra(format!(
                "injected sandbox fault for {instance_id}/{phase}/{traj}"
            )));
        }
        let override_outcome = self.profile.outcome(instance_id, phase);
        // An unscripted patch behaves like no patch at all.
        let fallback = match phase {
            Phase::PostPatch => self.profile.outcome(instance_id, Phase::PrePatch),
            _ => None,
        };
        let duration = if fault < self.profile.faults.infra + self.profile.faults.timeout {
            timeout * 10.0 + 1.0
        } else {
            override_outcome
                .and_then(|o| o.seconds)
                .unwrap_or(sampled)
        };
        let default_pass = |is_f2p: bool| match phase {
            Phase::PostGold => true,
            Phase::PrePatch | Phase::PostPatch => !is_f2p,
        };
        let lookup = |o: Option<&PhaseOutcome>, t: &String| o.and_then(|o| o.tests.get(t).copied());
        let results: Vec<(&String, bool)> = fail_to_pass
            .iter()
            .map(|t| (t, true))
            .chain(pass_to_pass.iter().map(|t| (t, false)))
            .map(|(t, is_f2p)| {
                let pass = lookup(override_outcome, t)
                    .or_else(|| lookup(fallback, t))
                    .unwrap_or_else(|| default_pass(is_f2p));
                (t, pass)
            })
            .collect();

        let finished = if duration > timeout {
            ((results.len() as f64) * timeout / duration).floor() as usize
        } else {
            results.len()
        };
        let stdout: String = results[..finished]
            .iter()
            .map(|(t, pass)| format_test_line(t, *pass) + "\n")
            .collect();
        let exit = if results.iter().all(|(_, p)| *p) { 0 } else { 1 };
        Ok((exit, stdout, duration))
    }
}

impl SandboxBackend for SimBackend {
    fn name(&self) -> &str {
        "sim"
    }

    fn clock(&self) -> Clock {
        Clock::Simulated
    }

    fn build_image(&self, image: &PlannedImage, cache: &LayerCache) -> Result<BuildOutcome, BackendError> {
        let base = &image.spec.base_profile;
        if !self.profile.base_profiles.contains(base) {
            return Err(BackendError::BuildFailure {
                image_id: image.image_id().to_string(),
                log: format!("unknown base profile {base:?}"),
            });
        }
        if let Some(bad) = image
            .resolved
            .iter()
            .find(|r| self.profile.broken_packages.contains(&r.name))
        {
            return Err(BackendError::BuildFailure {
                image_id: image.image_id().to_string(),
                log: format!("installing {}=={} failed", bad.name, bad.version),
            });
        }
        let assigned: Vec<&String> = image.spec.assigned_instances.iter().collect();
        for (i, a) in assigned.iter().enumerate() {
            if let Some(b) = assigned[i + 1..].iter().find(|b| self.profile.conflicts(a, b)) {
                return Err(BackendError::BuildFailure {
                    image_id: image.image_id().to_string(),
                    log: format!("environments of {a} and {b} conflict"),
                });
            }
        }
        let stats = cache.claim(&image.layers);
        let cold = self.profile.cold_build_seconds(image);
        let hit = self.profile.cache_hit_build_seconds;
        let total = image.layers.len();
        let duration = if stats.misses == 0 {
            hit
        } else if stats.misses == total {
            cold
        } else {
            hit + (cold - hit) * stats.misses as f64 / total as f64
        };
        Ok(BuildOutcome {
            handle: ImageHandle {
                image_id: image.image_id().to_string(),
                tag: format!("sim/{}", image.image_id()),
                content_key: image.content_key(),
            },
            duration,
            cache: stats,
        })
    }

    fn create_sandbox(&self, image: &ImageHandle, workdir_seed: u64) -> Result<SandboxHandle, BackendError> {
        let mut st = self.state.lock().expect("sim state poisoned");
        if st.live.len() >= self.max_live {
            return Err(BackendError::ResourceExhausted { limit: self.max_live });
        }
        st.created += 1;
        let sandbox_id = format!("sim-sbx-{:06}", st.created);
        st.live.insert(sandbox_id.clone(), BTreeMap::new());
        st.peak = st.peak.max(st.live.len());
        Ok(SandboxHandle {
            sandbox_id,
            image_id: image.image_id.clone(),
            workdir: super::workdir_for(workdir_seed),
            created_at: st.created as f64,
        })
    }

    fn exec(&self, sandbox: &SandboxHandle, req: &ExecRequest, timeout: f64) -> Result<ExecResult, BackendError> {
        let mut st = self.state.lock().expect("sim state poisoned");
        let fs = st
            .live
            .get_mut(&sandbox.sandbox_id)
            .ok_or_else(|| BackendError::SandboxGone(sandbox.sandbox_id.clone()))?;
        let (exit_code, stdout, stderr, duration) = match &req.kind {
            ExecKind::Shell => self.run_shell(fs, &req.cmd),
            ExecKind::PrepareRepo { instance_id } => {
                if let Some(files) = self.profile.files.get(instance_id) {
                    fs.extend(files.iter().map(|(k, v)| (k.clone(), v.clone())));
                }
                (0, String::new(), String::new(), SHELL_SECONDS)
            }
            ExecKind::ApplyPatch { patch } => {
                let applied = Patch::parse(patch).and_then(|p| apply_to_tree(fs, &p));
                match applied {
                    Ok(()) => (0, String::new(), String::new(), self.profile.apply_seconds),
                    Err(e) => (1, String::new(), format!("{e}\n"), self.profile.apply_seconds),
                }
            }
            ExecKind::RunTests {
                instance_id,
                phase,
                trajectory_idx,
                fail_to_pass,
                pass_to_pass,
            } => {
                let (code, out, dur) =
                    self.run_tests(instance_id, *phase, *trajectory_idx, fail_to_pass, pass_to_pass, timeout)?;
                (code, out, String::new(), dur)
            }
        };
        if duration > timeout {
            return Ok(ExecResult {
                exit_code: TIMEOUT_EXIT_CODE,
                stdout,
                stderr: format!("{stderr}timed out after {timeout}s\n"),
                duration: timeout,
                timed_out: true,
            });
        }
        Ok(ExecResult {
            exit_code,
            stdout,
            stderr,
            duration,
            timed_out: false,
        })
    }

    fn destroy(&self, sandbox: &SandboxHandle) {
        let mut st = self.state.lock().expect("sim state poisoned");
        if st.live.remove(&sandbox.sandbox_id).is_some() {
            self.freed.notify_all();
        }
    }

    fn live_sandboxes(&self) -> usize {
        self.state.lock().expect("sim state poisoned").live.len()
    }

    fn peak_sandboxes(&self) -> usize {
        self.state.lock().expect("sim state poisoned").peak
    }

    fn max_sandboxes(&self) -> usize {
        self.max_live
    }

    fn wait_for_capacity(&self) {
        let st = self.state.lock().expect("sim state poisoned");
        if st.live.len() >= self.max_live {
            let _unused = self
                .freed
                .wait_timeout(st, Duration::from_millis(50))
                .expect("sim state poisoned");
        }
    }
}
