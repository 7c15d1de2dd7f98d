//! Builds a minimal image on a local container engine and runs one command
//! in a sandbox. Set FORGE_CONTAINER_HOST to use a non-default socket.

use forge_harness::backend::{DockerBackend, ExecRequest, SandboxBackend, SandboxGuard};
use forge_harness::model::{DependencySpec, SizeModel, TaskInstance};
use forge_harness::plan::{plan_image, LayerCache, VersionIndex};
use forge_harness::pruner::ImageSpec;
use forge_harness::version::{Constraint, Version};

fn main() {
    let backend = match DockerBackend::connect(2) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("skipping: {e}");
            return;
        }
    };
    let inst = TaskInstance {
        instance_id: "smoke".into(),
        repo: "smoke".into(),
        base_commit: "0".into(),
        deps: vec![DependencySpec::new("six", Constraint::Any)],
        fail_to_pass: vec!["smoke::t".into()],
        pass_to_pass: vec![],
        gold_patch: String::new(),
        test_cmd: "true".into(),
        extra: Default::default(),
    };
    let index: VersionIndex = [("six".to_string(), [Version::new(vec![1, 16, 0])].into())].into();
    let spec = ImageSpec::for_instance(&inst, "slim", &SizeModel::default());
    let planned = plan_image(&spec, &index).expect("resolvable");
    print!("{}", forge_harness::backend::docker::dockerfile("python:3.11-slim", &planned));

    let built = match backend.build_image(&planned, &LayerCache::new()) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("build failed: {e}");
            std::process::exit(1);
        }
    };
    println!("built {} in {:.1}s", built.handle.tag, built.duration);
    let sandbox = backend.create_sandbox(&built.handle, 0).expect("sandbox");
    let guard = SandboxGuard::new(&backend, sandbox);
    let r = backend
        .exec(guard.handle(), &ExecRequest::shell("python -c 'import six; print(six.__version__)'"), 30.0)
        .expect("exec");
    println!("exit {} stdout {:?}", r.exit_code, r.stdout.trim());
}
