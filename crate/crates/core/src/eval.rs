//! Patch grading inside a fresh sandbox.
//!
//! Test commands report results as one `TEST <id> PASS|FAIL` line per test.
//! Anything else on stdout is ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{
    create_sandbox_queued, BackendError, ExecKind, ExecRequest, ExecResult, ImageHandle, Phase,
    SandboxBackend, SandboxGuard,
};
use crate::dist::derive_seed;
use crate::model::TaskInstance;
use crate::plan::{plan_image, LayerCache, VersionIndex};
use crate::pruner::{ImageSpec, MergeValidator};

pub const DEFAULT_TIMEOUT: f64 = 120.0;

/// Placeholder in `test_cmd` replaced by the space-separated test ids.
pub const TESTS_PLACEHOLDER: &str = "{tests}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Pass,
    Fail,
    NotRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictStatus {
    Resolved,
    TestsFailed,
    PatchApplyError,
    BuildError,
    Timeout,
    InfraError,
}

impl VerdictStatus {
    pub const ALL: [VerdictStatus; 6] = [
        VerdictStatus::Resolved,
        VerdictStatus::TestsFailed,
        VerdictStatus::PatchApplyError,
        VerdictStatus::BuildError,
        VerdictStatus::Timeout,
        VerdictStatus::InfraError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Resolved => "Resolved",
            VerdictStatus::TestsFailed => "TestsFailed",
            VerdictStatus::PatchApplyError => "PatchApplyError",
            VerdictStatus::BuildError => "BuildError",
            VerdictStatus::Timeout => "Timeout",
            VerdictStatus::InfraError => "InfraError",
        }
    }
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub instance_id: String,
    pub trajectory_idx: u32,
    pub status: VerdictStatus,
    pub per_test: BTreeMap<String, TestOutcome>,
    pub eval_seconds: f64,
    pub reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Everything in a verdict except its timing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VerdictOutcome {
    pub instance_id: String,
    pub trajectory_idx: u32,
    pub status: VerdictStatus,
    pub per_test: BTreeMap<String, TestOutcome>,
    pub reward: u8,
}

impl Verdict {
    /// A verdict for a run that produced no test results.
    pub fn without_tests(
        instance: &TaskInstance,
        trajectory_idx: u32,
        status: VerdictStatus,
        eval_seconds: f64,
        detail: impl Into<String>,
    ) -> Self {
        debug_assert_ne!(status, VerdictStatus::Resolved);
        Verdict {
            instance_id: instance.instance_id.clone(),
            trajectory_idx,
            status,
            per_test: instance
                .all_tests()
                .map(|t| (t.clone(), TestOutcome::NotRun))
                .collect(),
            eval_seconds,
            reward: 0,
            detail: Some(detail.into()),
        }
    }

    pub fn outcome(&self) -> VerdictOutcome {
        VerdictOutcome {
            instance_id: self.instance_id.clone(),
            trajectory_idx: self.trajectory_idx,
            status: self.status,
            per_test: self.per_test.clone(),
            reward: self.reward,
        }
    }
}

/// Sorted outcomes, for comparing verdict multisets across runs.
pub fn outcome_multiset(verdicts: &[Verdict]) -> Vec<VerdictOutcome> {
    let mut v: Vec<_> = verdicts.iter().map(Verdict::outcome).collect();
    v.sort();
    v
}

pub fn format_test_line(test_id: &str, pass: bool) -> String {
    format!("TEST {test_id} {}", if pass { "PASS" } else { "FAIL" })
}

/// Later lines for the same test override earlier ones.
pub fn parse_test_output(stdout: &str) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    for line in stdout.lines() {
        let mut parts = line.split_whitespace();
        let (Some("TEST"), Some(id), Some(result), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            continue;
        };
        match result {
            "PASS" => out.insert(id.to_string(), true),
            "FAIL" => out.insert(id.to_string(), false),
            _ => continue,
        };
    }
    out
}

/// Maps observed results onto the instance's test partition; tests that
/// never reported are `NotRun`.
pub fn test_outcomes(instance: &TaskInstance, observed: &BTreeMap<String, bool>) -> BTreeMap<String, TestOutcome> {
    instance
        .all_tests()
        .map(|t| {
            let o = match observed.get(t) {
                Some(true) => TestOutcome::Pass,
                Some(false) => TestOutcome::Fail,
                None => TestOutcome::NotRun,
            };
            (t.clone(), o)
        })
        .collect()
}

/// Resolved, with reward 1, iff every listed test passed. Missing entries
/// count as not run.
pub fn grade(per_test: &BTreeMap<String, TestOutcome>, instance: &TaskInstance) -> (VerdictStatus, u8) {
    let all_pass = instance
        .all_tests()
        .all(|t| per_test.get(t) == Some(&TestOutcome::Pass));
    if all_pass {
        (VerdictStatus::Resolved, 1)
    } else {
        (VerdictStatus::TestsFailed, 0)
    }
}

/// Which behavior a patch is expected to exhibit.
pub fn phase_for(instance: &TaskInstance, patch: &str) -> Phase {
    if patch.trim().is_empty() {
        Phase::PrePatch
    } else if patch == instance.gold_patch {
        Phase::PostGold
    } else {
        Phase::PostPatch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Cap on patch application plus test execution.
    pub timeout: f64,
    pub trajectory_idx: u32,
    pub workdir_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            timeout: DEFAULT_TIMEOUT,
            trajectory_idx: 0,
            workdir_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalStep {
    pub step: &'static str,
    pub result: ExecResult,
}

/// Raw artifacts of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalLog {
    pub phase: Phase,
    pub sandbox_id: Option<String>,
    pub workdir: Option<String>,
    pub steps: Vec<EvalStep>,
}

/// POSIX single-quote escaping.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:=@%+,".contains(c))
    {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn is_remote_repo(repo: &str) -> bool {
    repo.contains("://") || repo.starts_with("git@") || repo.starts_with('/')
}

pub fn prepare_request(instance: &TaskInstance, workdir: &str) -> ExecRequest {
    let wd = shell_quote(workdir);
    let cmd = if is_remote_repo(&instance.repo) {
        format!(
            "git clone --quiet {repo} {wd} && cd {wd} && git checkout --quiet {commit}",
            repo = shell_quote(&instance.repo),
            commit = shell_quote(&instance.base_commit),
        )
    } else {
        format!("mkdir -p {wd}")
    };
    ExecRequest {
        cmd,
        env: Vec::new(),
        kind: ExecKind::PrepareRepo {
            instance_id: instance.instance_id.clone(),
        },
    }
}

pub fn apply_request(patch: &str, workdir: &str) -> ExecRequest {
    ExecRequest {
        cmd: format!("cd {}", shell_quote(workdir)),
        env: Vec::new(),
        kind: ExecKind::ApplyPatch {
            patch: patch.to_string(),
        },
    }
}

pub fn test_request(instance: &TaskInstance, phase: Phase, trajectory_idx: u32, workdir: &str) -> ExecRequest {
    let tests: Vec<&String> = instance.all_tests().collect();
    let joined = tests.iter().map(|t| shell_quote(t)).collect::<Vec<_>>().join(" ");
    let cmd = format!(
        "cd {} && {}",
        shell_quote(workdir),
        instance.test_cmd.replace(TESTS_PLACEHOLDER, &joined)
    );
    ExecRequest {
        cmd,
        env: vec![
            ("FORGE_INSTANCE".into(), instance.instance_id.clone()),
            ("FORGE_PHASE".into(), phase.as_str().into()),
            (
                "FORGE_TESTS".into(),
                tests.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(" "),
            ),
        ],
        kind: ExecKind::RunTests {
            instance_id: instance.instance_id.clone(),
            phase,
            trajectory_idx,
            fail_to_pass: instance.fail_to_pass.clone(),
            pass_to_pass: instance.pass_to_pass.clone(),
        },
    }
}

pub fn evaluate(
    instance: &TaskInstance,
    patch: &str,
    backend: &dyn SandboxBackend,
    image: &ImageHandle,
    opts: &EvalOptions,
) -> Verdict {
    evaluate_logged(instance, patch, backend, image, opts).0
}

/// Like [`evaluate`], also returning the raw exec results.
pub fn evaluate_logged(
    instance: &TaskInstance,
    patch: &str,
    backend: &dyn SandboxBackend,
    image: &ImageHandle,
    opts: &EvalOptions,
) -> (Verdict, EvalLog) {
    let phase = phase_for(instance, patch);
    let mut log = EvalLog {
        phase,
        sandbox_id: None,
        workdir: None,
        steps: Vec::new(),
    };
    let traj = opts.trajectory_idx;
    let infra = |e: &BackendError, elapsed: f64| {
        Verdict::without_tests(instance, traj, VerdictStatus::InfraError, elapsed, e.to_string())
    };
    let timed_out = |per_test: BTreeMap<String, TestOutcome>| Verdict {
        instance_id: instance.instance_id.clone(),
        trajectory_idx: traj,
        status: VerdictStatus::Timeout,
        per_test,
        eval_seconds: opts.timeout,
        reward: 0,
        detail: Some(format!("exceeded {}s cap", opts.timeout)),
    };

    let handle = match create_sandbox_queued(backend, image, opts.workdir_seed) {
        Ok(h) => h,
        Err(e) => return (infra(&e, 0.0), log),
    };
    let guard = SandboxGuard::new(backend, handle);
    let sb = guard.handle();
    log.sandbox_id = Some(sb.sandbox_id.clone());
    log.workdir = Some(sb.workdir.clone());

    // Checkout is environment setup, not part of the evaluation budget.
    match backend.exec(sb, &prepare_request(instance, &sb.workdir), opts.timeout) {
        Err(e) => return (infra(&e, 0.0), log),
        Ok(r) => {
            let ok = r.exit_code == 0;
            log.steps.push(EvalStep { step: "prepare", result: r });
            if !ok {
                let e = BackendError::Infra("repository checkout failed".into());
                return (infra(&e, 0.0), log);
            }
        }
    }

    let mut elapsed = 0.0;
    if phase != Phase::PrePatch {
        let r = match backend.exec(sb, &apply_request(patch, &sb.workdir), opts.timeout) {
            Ok(r) => r,
            Err(e) => return (infra(&e, elapsed), log),
        };
        elapsed += r.duration;
        let (timed, code, stderr) = (r.timed_out, r.exit_code, r.stderr.clone());
        log.steps.push(EvalStep { step: "apply", result: r });
        if timed || elapsed >= opts.timeout {
            return (timed_out(test_outcomes(instance, &BTreeMap::new())), log);
        }
        if code != 0 {
            let detail = stderr.lines().next().unwrap_or("patch rejected").to_string();
            let v = Verdict::without_tests(instance, traj, VerdictStatus::PatchApplyError, elapsed, detail);
            return (v, log);
        }
    }

    let remaining = opts.timeout - elapsed;
    let req = test_request(instance, phase, traj, &sb.workdir);
    let r = match backend.exec(sb, &req, remaining) {
        Ok(r) => r,
        Err(e) => return (infra(&e, elapsed), log),
    };
    elapsed += r.duration;
    let per_test = test_outcomes(instance, &parse_test_output(&r.stdout));
    let timed = r.timed_out;
    log.steps.push(EvalStep { step: "test", result: r });
    if timed || elapsed > opts.timeout {
        return (timed_out(per_test), log);
    }
    let (status, reward) = grade(&per_test, instance);
    let verdict = Verdict {
        instance_id: instance.instance_id.clone(),
        trajectory_idx: traj,
        status,
        per_test,
        eval_seconds: elapsed,
        reward,
        detail: None,
    };
    (verdict, log)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceValidation {
    pub instance_id: String,
    pub valid: bool,
    pub reasons: Vec<String>,
}

fn run_failure(v: &Verdict, when: &str) -> Option<String> {
    match v.status {
        VerdictStatus::InfraError => Some(format!(
            "InfraError {when}: {}",
            v.detail.as_deref().unwrap_or("sandbox fault")
        )),
        VerdictStatus::Timeout => Some(format!("tests time out {when}")),
        VerdictStatus::PatchApplyError => Some(format!(
            "gold patch does not apply: {}",
            v.detail.as_deref().unwrap_or("rejected")
        )),
        _ => None,
    }
}

/// Checks that fail-to-pass tests fail and pass-to-pass tests pass on the
/// base commit, and that everything passes with the gold patch.
pub fn validate_instance(
    instance: &TaskInstance,
    backend: &dyn SandboxBackend,
    image: &ImageHandle,
    timeout: f64,
) -> InstanceValidation {
    let mut reasons = Vec::new();
    let seed = derive_seed(0, &["validate", &instance.instance_id]);
    let opts = EvalOptions {
        timeout,
        trajectory_idx: 0,
        workdir_seed: seed,
    };

    let pre = evaluate(instance, "", backend, image, &opts);
    if let Some(r) = run_failure(&pre, "pre-patch") {
        reasons.push(r);
    } else {
        for t in &instance.fail_to_pass {
            match pre.per_test.get(t) {
                Some(TestOutcome::Pass) => reasons.push(format!("F2P {t} passes pre-patch")),
                Some(TestOutcome::NotRun) | None => reasons.push(format!("F2P {t} did not run pre-patch")),
                Some(TestOutcome::Fail) => {}
            }
        }
        for t in &instance.pass_to_pass {
            match pre.per_test.get(t) {
                Some(TestOutcome::Fail) => reasons.push(format!("P2P {t} fails pre-patch")),
                Some(TestOutcome::NotRun) | None => reasons.push(format!("P2P {t} did not run pre-patch")),
                Some(TestOutcome::Pass) => {}
            }
        }
    }

    if instance.gold_patch.trim().is_empty() {
        reasons.push("no gold patch".into());
    } else {
        let post = evaluate(instance, &instance.gold_patch, backend, image, &opts);
        if let Some(r) = run_failure(&post, "post-gold") {
            reasons.push(r);
        } else {
            let tagged = instance
                .fail_to_pass
                .iter()
                .map(|t| ("F2P", t))
                .chain(instance.pass_to_pass.iter().map(|t| ("P2P", t)));
            for (kind, t) in tagged {
                match post.per_test.get(t) {
                    Some(TestOutcome::Pass) => {}
                    Some(TestOutcome::Fail) => reasons.push(format!("{kind} {t} fails post-gold")),
                    _ => reasons.push(format!("{kind} {t} did not run post-gold")),
                }
            }
        }
    }

    InstanceValidation {
        instance_id: instance.instance_id.clone(),
        valid: reasons.is_empty(),
        reasons,
    }
}

/// Accepts a merge only if the merged image builds and every instance
/// assigned to it still validates inside it.
pub struct BackendMergeValidator<'a> {
    backend: &'a dyn SandboxBackend,
    instances: HashMap<&'a str, &'a TaskInstance>,
    index: VersionIndex,
    cache: LayerCache,
    timeout: f64,
}

impl<'a> BackendMergeValidator<'a> {
    pub fn new(
        backend: &'a dyn SandboxBackend,
        instances: &'a [TaskInstance],
        index: VersionIndex,
        timeout: f64,
    ) -> Self {
        BackendMergeValidator {
            backend,
            instances: instances.iter().map(|i| (i.instance_id.as_str(), i)).collect(),
            index,
            cache: LayerCache::new(),
            timeout,
        }
    }
}

impl MergeValidator for BackendMergeValidator<'_> {
    fn accept(&mut self, merged: &ImageSpec, _absorbed: &[String]) -> bool {
        let Ok(planned) = plan_image(merged, &self.index) else {
            return false;
        };
        let Ok(built) = self.backend.build_image(&planned, &self.cache) else {
            return false;
        };
        merged.assigned_instances.iter().all(|id| {
            self.instances
                .get(id.as_str())
                .is_some_and(|inst| validate_instance(inst, self.backend, &built.handle, self.timeout).valid)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SimBackend, SimProfile};
    use crate::plan::LayerKey;

    fn instance(f2p: &[&str], p2p: &[&str]) -> TaskInstance {
        let line = serde_json::json!({
            "instance_id": "x",
            "repo": "demo/x",
            "base_commit": "abc",
            "deps": [],
            "fail_to_pass": f2p,
            "pass_to_pass": p2p,
            "gold_patch": "--- /dev/null\n+++ b/fix.py\n@@ -0,0 +1 @@\n+fixed\n",
            "test_cmd": "pytest {tests}",
        });
        crate::model::parse_manifest(&line.to_string()).unwrap().remove(0)
    }

    fn image() -> ImageHandle {
        ImageHandle {
            image_id: "img".into(),
            tag: "sim/img".into(),
            content_key: LayerKey::base("slim"),
        }
    }

    fn backend(extra: &str) -> SimBackend {
        let text = format!(
            r#"
            name = "unit"
            seed = 3
            cache_hit_build_seconds = 2.0
            apply_seconds = 1.0
            test_seconds = {{ kind = "constant", value = 16.0 }}
            [build_seconds]
            default = 58.0
            {extra}
            "#
        );
        SimBackend::new(SimProfile::from_toml(&text).unwrap())
    }

    fn outcomes(pairs: &[(&str, TestOutcome)]) -> BTreeMap<String, TestOutcome> {
        pairs.iter().map(|(t, o)| (t.to_string(), *o)).collect()
    }

    #[test]
    fn parses_result_lines_and_ignores_noise() {
        let out = "collected 3\nTEST a PASS\nTEST b FAIL\nTEST  c  PASS\nTEST d MAYBE\nTEST a FAIL\n";
        let parsed = parse_test_output(out);
        assert_eq!(parsed.get("a"), Some(&false));
        assert_eq!(parsed.get("b"), Some(&false));
        assert_eq!(parsed.get("c"), Some(&true));
        assert_eq!(parsed.get("d"), None);
        assert_eq!(format_test_line("t1", true), "TEST t1 PASS");
    }

    #[test]
    fn grade_examples() {
        let inst = instance(&["t1"], &["t2"]);
        use TestOutcome::*;
        assert_eq!(grade(&outcomes(&[("t1", Pass), ("t2", Pass)]), &inst), (VerdictStatus::Resolved, 1));
        assert_eq!(grade(&outcomes(&[("t1", Pass), ("t2", Fail)]), &inst), (VerdictStatus::TestsFailed, 0));
        assert_eq!(grade(&outcomes(&[("t1", Pass)]), &inst), (VerdictStatus::TestsFailed, 0));
        assert_eq!(grade(&outcomes(&[("t1", Pass), ("t2", NotRun)]), &inst), (VerdictStatus::TestsFailed, 0));
    }

    #[test]
    fn gold_patch_resolves_and_releases_sandbox() {
        let b = backend("");
        let inst = instance(&["t1"], &["t2"]);
        let v = evaluate(&inst, &inst.gold_patch, &b, &image(), &EvalOptions::default());
        assert_eq!((v.status, v.reward, v.eval_seconds), (VerdictStatus::Resolved, 1, 17.0));
        assert_eq!(b.live_sandboxes(), 0);
    }

    #[test]
    fn regression_in_pass_to_pass_zeroes_reward() {
        let b = backend("[exec_outcomes.x.post_patch]\ntests = { t1 = true, t2 = false }");
        let inst = instance(&["t1"], &["t2"]);
        let patch = "--- /dev/null\n+++ b/other.py\n@@ -0,0 +1 @@\n+x\n";
        let v = evaluate(&inst, patch, &b, &image(), &EvalOptions::default());
        assert_eq!((v.status, v.reward), (VerdictStatus::TestsFailed, 0));
    }

    #[test]
    fn slow_tests_hit_the_cap() {
        let b = backend("[exec_outcomes.x.post_gold]\nseconds = 600.0");
        let inst = instance(&["t1", "t3"], &["t2"]);
        let v = evaluate(&inst, &inst.gold_patch, &b, &image(), &EvalOptions::default());
        assert_eq!((v.status, v.reward, v.eval_seconds), (VerdictStatus::Timeout, 0, 120.0));
        assert!(v.per_test.values().all(|o| *o == TestOutcome::NotRun));
        assert_eq!(b.live_sandboxes(), 0);
    }

    #[test]
    fn rejected_hunks_are_patch_apply_errors() {
        let b = backend("");
        let inst = instance(&["t1"], &[]);
        let patch = "--- a/missing.py\n+++ b/missing.py\n@@ -1 +1 @@\n-a\n+b\n";
        let v = evaluate(&inst, patch, &b, &image(), &EvalOptions::default());
        assert_eq!(v.status, VerdictStatus::PatchApplyError);
        assert_eq!(v.eval_seconds, 1.0);
    }

    #[test]
    fn infra_faults_become_verdicts() {
        let b = backend("[faults]\ninfra = 1.0");
        let inst = instance(&["t1"], &[]);
        let v = evaluate(&inst, &inst.gold_patch, &b, &image(), &EvalOptions::default());
        assert_eq!((v.status, v.reward), (VerdictStatus::InfraError, 0));
        assert_eq!(b.live_sandboxes(), 0);
        let val = validate_instance(&inst, &b, &image(), 120.0);
        assert!(!val.valid);
        assert!(val.reasons[0].starts_with("InfraError"));
    }

    #[test]
    fn validation_reports_each_violation() {
        let inst = instance(&["t1"], &["t2"]);
        assert!(validate_instance(&inst, &backend(""), &image(), 120.0).valid);

        let b = backend("[exec_outcomes.x.pre_patch]\ntests = { t1 = true }");
        let val = validate_instance(&inst, &b, &image(), 120.0);
        assert_eq!(val.reasons, vec!["F2P t1 passes pre-patch".to_string()]);

        let b = backend("[exec_outcomes.x.post_gold]\ntests = { t2 = false }");
        let val = validate_instance(&inst, &b, &image(), 120.0);
        assert_eq!(val.reasons, vec!["P2P t2 fails post-gold".to_string()]);
    }

    #[test]
    fn shell_quoting() {
        assert_eq!(shell_quote("tests/a.py::t"), "tests/a.py::t");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
        assert_eq!(shell_quote(""), "''");
    }
}
