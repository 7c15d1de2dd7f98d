//! Uniform sandbox interface over a simulated engine and a real container
//! engine.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{CacheStats, LayerCache, LayerKey, PlannedImage};

pub mod docker;
pub mod sim;

pub use docker::DockerBackend;
pub use sim::{FaultRates, PhaseOutcome, SimBackend, SimProfile};

/// Exit code reported when a command is killed at its timeout.
pub const TIMEOUT_EXIT_CODE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("build of {image_id} failed: {log}")]
    BuildFailure { image_id: String, log: String },
    #[error("sandbox limit of {limit} live sandboxes reached")]
    ResourceExhausted { limit: usize },
    #[error("sandbox {0} no longer exists")]
    SandboxGone(String),
    #[error("infrastructure fault: {0}")]
    Infra(String),
    #[error("container engine unavailable: {0}")]
    Unavailable(String),
}

/// Which clock durations are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PrePatch,
    PostPatch,
    PostGold,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PrePatch => "pre_patch",
            Phase::PostPatch => "post_patch",
            Phase::PostGold => "post_gold",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "pre_patch" => Some(Phase::PrePatch),
            "post_patch" => Some(Phase::PostPatch),
            "post_gold" => Some(Phase::PostGold),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageHandle {
    pub image_id: String,
    pub tag: String,
    pub content_key: LayerKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub handle: ImageHandle,
    pub duration: f64,
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxHandle {
    pub sandbox_id: String,
    pub image_id: String,
    pub workdir: String,
    pub created_at: f64,
}

/// What an exec is for. The real engine runs the command line (and applies
/// patches itself); the simulator interprets the intent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecKind {
    Shell,
    PrepareRepo {
        instance_id: String,
    },
    ApplyPatch {
        patch: String,
    },
    RunTests {
        instance_id: String,
        phase: Phase,
        trajectory_idx: u32,
        fail_to_pass: Vec<String>,
        pass_to_pass: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRequest {
    pub cmd: String,
    pub env: Vec<(String, String)>,
    pub kind: ExecKind,
}

impl ExecRequest {
    pub fn shell(cmd: impl Into<String>) -> Self {
        ExecRequest {
            cmd: cmd.into(),
            env: Vec::new(),
            kind: ExecKind::Shell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub exit_code: i64,
    pub stdout: String,
    pub stderr: String,
    pub duration: f64,
    pub timed_out: bool,
}

/// Execution engine for builds and sandboxed commands.
///
/// Implementations must be callable from many threads at once.
pub trait SandboxBackend: Send + Sync {
    fn name(&self) -> &str;

    fn clock(&self) -> Clock;

    /// Builds an image with its dependencies installed. Layers already in
    /// `cache` are reused.
    fn build_image(&self, image: &PlannedImage, cache: &LayerCache) -> Result<BuildOutcome, BackendError>;

    /// Fails with `ResourceExhausted` at the live-sandbox limit.
    fn create_sandbox(&self, image: &ImageHandle, workdir_seed: u64) -> Result<SandboxHandle, BackendError>;

    fn exec(&self, sandbox: &SandboxHandle, req: &ExecRequest, timeout: f64) -> Result<ExecResult, BackendError>;

    /// Idempotent.
    fn destroy(&self, sandbox: &SandboxHandle);

    fn live_sandboxes(&self) -> usize;

    fn peak_sandboxes(&self) -> usize;

    fn max_sandboxes(&self) -> usize;

    /// Blocks briefly until a sandbox slot may have been released.
    fn wait_for_capacity(&self) {
        thread::sleep(Duration::from_millis(5));
    }
}

/// Creates a sandbox, queueing while the backend is at capacity.
pub fn create_sandbox_queued(
    backend: &dyn SandboxBackend,
    image: &ImageHandle,
    workdir_seed: u64,
) -> Result<SandboxHandle, BackendError> {
    loop {
        match backend.create_sandbox(image, workdir_seed) {
            Err(BackendError::ResourceExhausted { .. }) => backend.wait_for_capacity(),
            other => return other,
        }
    }
}

/// Destroys its sandbox when dropped, so no exit path leaks one.
pub struct SandboxGuard<'a> {
    backend: &'a dyn SandboxBackend,
    handle: SandboxHandle,
}

impl<'a> SandboxGuard<'a> {
    pub fn new(backend: &'a dyn SandboxBackend, handle: SandboxHandle) -> Self {
        SandboxGuard { backend, handle }
    }

    pub fn handle(&self) -> &SandboxHandle {
        &self.handle
    }
}

impl Drop for SandboxGuard<'_> {
    fn drop(&mut self) {
        self.backend.destroy(&self.handle);
    }
}

/// Randomized per-sandbox working directory.
pub fn workdir_for(seed: u64) -> String {
    let tag = crate::dist::derive_seed(seed, &["workdir"]);
    format!("/work/{tag:016x}")
}
