//! Synthetic corpora with Zipf-distributed package popularity.

use std::collections::BTreeSet;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::dist::derive_seed;
use crate::model::{DependencySpec, TaskInstance};
use crate::version::{Constraint, Version};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipfCorpus {
    pub instances: usize,
    pub packages: usize,
    /// Zipf exponent over package popularity ranks.
    pub exponent: f64,
    /// Dependencies per instance, inclusive bounds.
    pub min_deps: usize,
    pub max_deps: usize,
    /// Fraction of dependencies pinned to one exact release.
    pub pin_rate: f64,
    /// Fraction of unpinned dependencies carrying a lower bound.
    pub range_rate: f64,
    /// Minor releases per package: `1.0` through `1.<n-1>`.
    pub releases: u32,
    pub seed: u64,
}

impl Default for ZipfCorpus {
    /// The bundled 1,000-instance corpus.
    fn default() -> Self {
        ZipfCorpus {
            instances: 1000,
            packages: 200,
            exponent: 1.1,
            min_deps: 3,
            max_deps: 8,
            pin_rate: 0.05,
            range_rate: 0.5,
            releases: 10,
            seed: 7,
        }
    }
}

pub fn package_name(rank: usize) -> String {
    format!("pkg{rank:03}")
}

fn release(minor: u32) -> Version {
    Version::new(vec![1, u64::from(minor)])
}

impl ZipfCorpus {
    pub fn generate(&self) -> Vec<TaskInstance> {
        assert!(self.packages >= self.max_deps, "not enough packages for max_deps");
        assert!(self.min_deps >= 1 && self.min_deps <= self.max_deps);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["zipf-corpus"]));
        let zipf = Zipf::new(self.packages as f64, self.exponent).expect("valid zipf parameters");
        (0..self.instances)
            .map(|i| {
                let k = rng.random_range(self.min_deps..=self.max_deps);
                let mut ranks = BTreeSet::new();
                while ranks.len() < k {
                    ranks.insert(zipf.sample(&mut rng) as usize - 1);
                }
                let deps = ranks
                    .into_iter()
                    .map(|r| DependencySpec::new(package_name(r), self.constraint(&mut rng)))
                    .collect();
                self.instance(i, deps)
            })
            .collect()
    }

    fn constraint<R: Rng>(&self, rng: &mut R) -> Constraint {
        if rng.random_bool(self.pin_rate) {
            Constraint::exact(release(rng.random_range(0..self.releases)))
        } else if rng.random_bool(self.range_rate) {
            let lo = release(rng.random_range(0..self.releases / 2));
            Constraint::range(Some(lo), None).expect("lower bound only is non-empty")
        } else {
            Constraint::Any
        }
    }

    fn instance(&self, i: usize, deps: Vec<DependencySpec>) -> TaskInstance {
        let id = format!("zipf__{i:04}");
        TaskInstance {
            instance_id: id.clone(),
            repo: format!("synthetic/repo-{:02}", i % 40),
            base_commit: format!("{:012x}", derive_seed(self.seed, &["commit", &id]) >> 16),
            deps,
            fail_to_pass: vec![format!("tests/test_{i:04}.py::test_fix")],
            pass_to_pass: vec![format!("tests/test_{i:04}.py::test_existing")],
            gold_patch: format!("--- /dev/null\n+++ b/src/fix_{i:04}.py\n@@ -0,0 +1 @@\n+FIXED = True\n"),
            test_cmd: "python -m pytest -q {tests}".into(),
            extra: Default::default(),
        }
    }
}
