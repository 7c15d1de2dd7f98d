//! Container engine backend speaking the Docker Engine HTTP API over its
//! local socket.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use bollard::container::LogOutput;
use bollard::exec::{CreateExecOptions, StartExecResults};
use bollard::models::ContainerCreateBody;
use bollard::query_parameters::{BuildImageOptionsBuilder, RemoveContainerOptionsBuilder};
use bollard::{body_full, Docker};
use futures_util::StreamExt;
use tokio::runtime::Runtime;

use super::{
    BackendError, BuildOutcome, Clock, ExecKind, ExecRequest, ExecResult, ImageHandle, SandboxBackend,
    SandboxHandle, TIMEOUT_EXIT_CODE,
};
use crate::eval::shell_quote;
use crate::patch::{apply_to_tree, Patch};
use crate::plan::{LayerCache, PlannedImage};

/// Environment variable overriding the engine address, e.g.
/// `unix:///run/user/1000/docker.sock` or `tcp://127.0.0.1:2375`.
pub const HOST_ENV: &str = "FORGE_CONTAINER_HOST";

/// Extra time granted to a command after its timeout before it is killed.
pub const GRACE_SECONDS: f64 = 1.0;

const PING_TIMEOUT: Duration = Duration::from_secs(5);

/// Exit statuses of coreutils `timeout` when it had to stop the command.
const TIMEOUT_STATUSES: [i64; 2] = [124, 137];

#[derive(Debug, Default)]
struct LiveSet {
    containers: HashMap<String, String>,
    peak: usize,
}

pub struct DockerBackend {
    docker: Docker,
    rt: Runtime,
    base_images: BTreeMap<String, String>,
    max_live: usize,
    live: Mutex<LiveSet>,
    freed: Condvar,
}

fn infra(e: bollard::errors::Error) -> BackendError {
    BackendError::Infra(e.to_string())
}

impl DockerBackend {
    /// Connects to the engine named by `FORGE_CONTAINER_HOST`, or the
    /// platform default socket, and checks that it answers.
    pub fn connect(max_live: usize) -> Result<Self, BackendError> {
        let host = std::env::var(HOST_ENV).ok().filter(|h| !h.is_empty());
        DockerBackend::connect_to(host.as_deref(), max_live)
    }

    pub fn connect_to(host: Option<&str>, max_live: usize) -> Result<Self, BackendError> {
        let unavailable = |e: String| BackendError::Unavailable(e);
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| unavailable(e.to_string()))?;
        let docker = {
            // The client spawns its connection pool on the current runtime.
            let _enter = rt.enter();
            match host {
                Some(h) => Docker::connect_with_host(h),
                None => Docker::connect_with_local_defaults(),
            }
            .map_err(|e| unavailable(e.to_string()))?
        };
        rt.block_on(async { tokio::time::timeout(PING_TIMEOUT, docker.ping()).await })
            .map_err(|_| unavailable("engine did not answer ping".into()))?
            .map_err(|e| unavailable(e.to_string()))?;
        Ok(DockerBackend {
            docker,
            rt,
            base_images: BTreeMap::from([("slim".to_string(), "python:3.11-slim".to_string())]),
            max_live: max_live.max(1),
            live: Mutex::new(LiveSet::default()),
            freed: Condvar::new(),
        })
    }

    /// Maps a base profile name to an image reference.
    pub fn with_base_image(mut self, profile: &str, image: &str) -> Self {
        self.base_images.insert(profile.to_string(), image.to_string());
        self
    }

    fn container_of(&self, sandbox: &SandboxHandle) -> Result<String, BackendError> {
        self.live
            .lock()
            .expect("live set poisoned")
            .containers
            .get(&sandbox.sandbox_id)
            .cloned()
            .ok_or_else(|| BackendError::SandboxGone(sandbox.sandbox_id.clone()))
    }

    fn run(
        &self,
        container: &str,
        script: &str,
        env: &[(String, String)],
        timeout: f64,
    ) -> Result<ExecResult, BackendError> {
        let cmd = vec![
            "timeout".to_string(),
            "-k".to_string(),
            format!("{GRACE_SECONDS}"),
            format!("{:.3}", timeout.max(0.001)),
            "sh".to_string(),
            "-c".to_string(),
            script.to_string(),
        ];
        let env: Vec<String> = env.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let started = Instant::now();
        let outcome = self.rt.block_on(async {
            let created = self
                .docker
                .create_exec(
                    container,
                    CreateExecOptions {
                        cmd: Some(cmd),
                        env: Some(env),
                        attach_stdout: Some(true),
                        attach_stderr: Some(true),
                        ..Default::default()
                    },
                )
                .await
                .map_err(|e| match e {
                    bollard::errors::Error::DockerResponseServerError { status_code: 404 | 409, .. } => {
                        BackendError::SandboxGone(container.to_string())
                    }
                    other => infra(other),
                })?;
            let mut stdout = String::new();
            let mut stderr = String::new();
            let read = async {
                if let StartExecResults::Attached { mut output, .. } =
                    self.docker.start_exec(&created.id, None).await.map_err(infra)?
                {
                    while let Some(chunk) = output.next().await {
                        match chunk.map_err(infra)? {
                            LogOutput::StdErr { message } => stderr.push_str(&String::from_utf8_lossy(&message)),
                            LogOutput::StdOut { message } | LogOutput::Console { message } => {
                                stdout.push_str(&String::from_utf8_lossy(&message))
                            }
                            LogOutput::StdIn { .. } => {}
                        }
                    }
                }
                Ok::<_, BackendError>(())
            };
            // Backstop in case the engine keeps the stream open past the kill.
            let limit = Duration::from_secs_f64(timeout + GRACE_SECONDS + 0.5);
            let cut_off = tokio::time::timeout(limit, read).await.is_err();
            let code = if cut_off {
                None
            } else {
                self.docker.inspect_exec(&created.id).await.map_err(infra)?.exit_code
            };
            Ok::<_, BackendError>((code, stdout, stderr, cut_off))
        });
        let (code, stdout, stderr, cut_off) = outcome?;
        let elapsed = started.elapsed().as_secs_f64();
        let killed = cut_off || code.is_some_and(|c| TIMEOUT_STATUSES.contains(&c)) && elapsed >= timeout;
        if killed {
            return Ok(ExecResult {
                exit_code: TIMEOUT_EXIT_CODE,
                stdout,
                stderr,
                duration: elapsed.clamp(timeout, timeout + GRACE_SECONDS),
                timed_out: true,
            });
        }
        Ok(ExecResult {
            exit_code: code.unwrap_or(TIMEOUT_EXIT_CODE),
            stdout,
            stderr,
            duration: elapsed.min(timeout + GRACE_SECONDS),
            timed_out: false,
        })
    }

    /// Reads the touched files out of the sandbox, applies the patch in
    /// memory with strict matching, and writes the results back.
    fn apply_patch(&self, container: &str, workdir: &str, patch: &str, timeout: f64) -> Result<ExecResult, BackendError> {
        let started = Instant::now();
        let fail = |msg: String| ExecResult {
            exit_code: 1,
            stdout: String::new(),
            stderr: format!("{msg}\n"),
            duration: started.elapsed().as_secs_f64(),
            timed_out: false,
        };
        let parsed = match Patch::parse(patch) {
            Ok(p) => p,
            Err(e) => return Ok(fail(e.to_string())),
        };
        let wd = shell_quote(workdir);
        let mut tree = BTreeMap::new();
        let paths: Vec<&String> = parsed
            .files
            .iter()
            .flat_map(|f| f.old_path.iter().chain(f.new_path.iter()))
            .collect();
        for path in &paths {
            let remaining = timeout - started.elapsed().as_secs_f64();
            let r = self.run(container, &format!("cd {wd} && cat -- {}", shell_quote(path)), &[], remaining)?;
            if r.timed_out {
                return Ok(r);
            }
            if r.exit_code == 0 {
                tree.insert(path.to_string(), r.stdout);
            }
        }
        let before = tree.clone();
        if let Err(e) = apply_to_tree(&mut tree, &parsed) {
            return Ok(fail(e.to_string()));
        }
        let mut script = format!("cd {wd}");
        for path in before.keys().filter(|p| !tree.contains_key(*p)) {
            script.push_str(&format!(" && rm -f -- {}", shell_quote(path)));
        }
        for (path, content) in tree.iter().filter(|(p, c)| before.get(*p) != Some(c)) {
            let b64 = base64::engine::general_purpose::STANDARD.encode(content);
            let q = shell_quote(path);
            script.push_str(&format!(
                " && mkdir -p \"$(dirname -- {q})\" && printf '%s' {b64} | base64 -d > {q}"
            ));
        }
        let remaining = timeout - started.elapsed().as_secs_f64();
        let mut r = self.run(container, &script, &[], remaining)?;
        r.duration = started.elapsed().as_secs_f64().min(timeout + GRACE_SECONDS);
        Ok(r)
    }
}

/// Build context: one `RUN` per resolved package, in layer order, so the
/// engine's own cache reuses shared prefixes.
pub fn dockerfile(base_image: &str, image: &PlannedImage) -> String {
    let mut out = format!("FROM {base_image}\n");
    for r in &image.resolved {
        out.push_str(&format!(
            "RUN pip install --no-cache-dir --disable-pip-version-check '{}=={}'\n",
            r.name, r.version
        ));
    }
    out.push_str("RUN mkdir -p /work\n");
    out
}

fn build_context(dockerfile: &str) -> std::io::Result<Vec<u8>> {
    let mut tar = tar::Builder::new(Vec::new());
    let mut header = tar::Header::new_gnu();
    header.set_size(dockerfile.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    tar.append_data(&mut header, "Dockerfile", dockerfile.as_bytes())?;
    tar.into_inner()
}

impl SandboxBackend for DockerBackend {
    fn name(&self) -> &str {
        "container"
    }

    fn clock(&self) -> Clock {
        Clock::Wall
    }

    fn build_image(&self, image: &PlannedImage, cache: &LayerCache) -> Result<BuildOutcome, BackendError> {
        let failure = |log: String| BackendError::BuildFailure {
            image_id: image.image_id().to_string(),
            log,
        };
        let base = self
            .base_images
            .get(&image.spec.base_profile)
            .ok_or_else(|| failure(format!("unknown base profile {:?}", image.spec.base_profile)))?;
        let context = build_context(&dockerfile(base, image)).map_err(|e| failure(e.to_string()))?;
        let content_key = image.content_key();
        let tag = format!("forge/{}:{}", image.image_id(), content_key.short());
        let stats = cache.claim(&image.layers);
        let started = Instant::now();
        let options = BuildImageOptionsBuilder::default()
            .dockerfile("Dockerfile")
            .t(&tag)
            .rm(true)
            .forcerm(true)
            .build();
        self.rt.block_on(async {
            let mut stream = self.docker.build_image(options, None, Some(body_full(context.into())));
            let mut log = String::new();
            while let Some(item) = stream.next().await {
                let info = item.map_err(|e| failure(format!("{log}{e}")))?;
                if let Some(s) = info.stream {
                    log.push_str(&s);
                }
                if let Some(err) = info.error_detail.and_then(|d| d.message) {
                    return Err(failure(format!("{log}{err}")));
                }
            }
            Ok(())
        })?;
        Ok(BuildOutcome {
            handle: ImageHandle {
                image_id: image.image_id().to_string(),
                tag,
                content_key,
            },
            duration: started.elapsed().as_secs_f64(),
            cache: stats,
        })
    }

    fn create_sandbox(&self, image: &ImageHandle, workdir_seed: u64) -> Result<SandboxHandle, BackendError> {
        {
            let live = self.live.lock().expect("live set poisoned");
            if live.containers.len() >= self.max_live {
                return Err(BackendError::ResourceExhausted { limit: self.max_live });
            }
        }
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let id = self.rt.block_on(async {
            let body = ContainerCreateBody {
                image: Some(image.tag.clone()),
                cmd: Some(vec!["sleep".into(), "infinity".into()]),
                labels: Some(HashMap::from([("forge.image_id".to_string(), image.image_id.clone())])),
                ..Default::default()
            };
            let created = self.docker.create_container(None, body).await.map_err(infra)?;
            self.docker.start_container(&created.id, None).await.map_err(infra)?;
            Ok::<_, BackendError>(created.id)
        })?;
        let mut live = self.live.lock().expect("live set poisoned");
        // Another caller may have taken the last slot while we were creating.
        if live.containers.len() >= self.max_live {
            drop(live);
            self.remove(&id);
            return Err(BackendError::ResourceExhausted { limit: self.max_live });
        }
        let sandbox_id = id[..12.min(id.len())].to_string();
        live.containers.insert(sandbox_id.clone(), id);
        live.peak = live.peak.max(live.containers.len());
        Ok(SandboxHandle {
            sandbox_id,
            image_id: image.image_id.clone(),
            workdir: super::workdir_for(workdir_seed),
            created_at: started,
        })
    }

    fn exec(&self, sandbox: &SandboxHandle, req: &ExecRequest, timeout: f64) -> Result<ExecResult, BackendError> {
        let container = self.container_of(sandbox)?;
        match &req.kind {
            ExecKind::ApplyPatch { patch } => self.apply_patch(&container, &sandbox.workdir, patch, timeout),
            _ => self.run(&container, &req.cmd, &req.env, timeout),
        }
    }

    fn destroy(&self, sandbox: &SandboxHandle) {
        let removed = self
            .live
            .lock()
            .expect("live set poisoned")
            .containers
            .remove(&sandbox.sandbox_id);
        if let Some(id) = removed {
            self.remove(&id);
            self.freed.notify_all();
        }
    }

    fn live_sandboxes(&self) -> usize {
        self.live.lock().expect("live set poisoned").containers.len()
    }

    fn peak_sandboxes(&self) -> usize {
        self.live.lock().expect("live set poisoned").peak
    }

    fn max_sandboxes(&self) -> usize {
        self.max_live
    }

    fn wait_for_capacity(&self) {
        let live = self.live.lock().expect("live set poisoned");
        if live.containers.len() >= self.max_live {
            let _unused = self
                .freed
                .wait_timeout(live, Duration::from_millis(200))
                .expect("live set poisoned");
        }
    }
}

impl DockerBackend {
    fn remove(&self, container: &str) {
        let options = RemoveContainerOptionsBuilder::default().force(true).build();
        // Best effort: a container that is already gone is fine.
        let _ = self
            .rt
            .block_on(self.docker.remove_container(container, Some(options)));
    }
}
