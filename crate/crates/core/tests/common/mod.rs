//! Independent pruning oracle for integration tests.
//!
//! Constraints are turned into bitsets over a per-package grid holding every
//! version any constraint mentions, plus one point below and one above. On
//! that grid a family of half-open ranges and pins intersects exactly when
//! the bitsets do.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use forge_harness::model::{DependencySpec, SizeModel, TaskInstance};
use forge_harness::pruner::{content_id, DEFAULT_BASE_PROFILE};
use forge_harness::version::{Constraint, Version};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Grid {
    points: BTreeMap<String, Vec<Version>>,
}

fn endpoints(c: &Constraint) -> Vec<Version> {
    match c {
        Constraint::Any => vec![],
        Constraint::Exact(v) => vec![v.clone()],
        Constraint::Range { min, max } => min.iter().chain(max.iter()).cloned().collect(),
    }
}

impl Grid {
    pub fn new(instances: &[TaskInstance]) -> Self {
        let mut sets: BTreeMap<String, BTreeSet<Version>> = BTreeMap::new();
        for inst in instances {
            for d in &inst.deps {
                let s = sets.entry(d.name.clone()).or_default();
                s.insert(Version::new(vec![0]));
                s.insert(Version::new(vec![999_999]));
                s.extend(endpoints(&d.constraint));
            }
        }
        let points: BTreeMap<_, Vec<Version>> = sets.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect();
        assert!(points.values().all(|p| p.len() <= 128), "grid too fine for u128 masks");
        Grid { points }
    }

    pub fn points(&self, name: &str) -> &[Version] {
        &self.points[name]
    }

    pub fn mask(&self, name: &str, c: &Constraint) -> u128 {
        self.points(name)
            .iter()
            .enumerate()
            .filter(|(_, v)| c.allows(v))
            .fold(0, |m, (i, _)| m | (1u128 << i))
    }
}

#[derive(Clone)]
struct OracleImage {
    masks: BTreeMap<String, u128>,
    constraints: BTreeMap<String, Constraint>,
    ids: BTreeSet<String>,
}

impl OracleImage {
    fn label(&self) -> String {
        content_id(DEFAULT_BASE_PROFILE, &self.constraints, &self.ids)
    }

    fn compatible(&self, other: &OracleImage) -> bool {
        self.masks
            .iter()
            .all(|(n, m)| other.masks.get(n).is_none_or(|o| m & o != 0))
    }

    fn savings(&self, other: &OracleImage, size: &SizeModel) -> u64 {
        size.base_bytes
            + self
                .masks
                .keys()
                .filter(|n| other.masks.contains_key(*n))
                .map(|n| size.package(n))
                .sum::<u64>()
    }

    fn absorb(&mut self, other: OracleImage) {
        for (n, m) in other.masks {
            *self.masks.entry(n).or_insert(u128::MAX) &= m;
        }
        for (n, c) in other.constraints {
            let merged = match self.constraints.get(&n) {
                // Only the id label depends on the constraint text.
                Some(mine) => mine.intersect(&c).expect("mask intersection is non-empty"),
                None => c,
            };
            self.constraints.insert(n, merged);
        }
        self.ids.extend(other.ids);
    }

    fn bytes(&self, size: &SizeModel) -> u64 {
        size.base_bytes + self.masks.keys().map(|n| size.package(n)).sum::<u64>()
    }
}

pub struct OracleResult {
    pub groups: BTreeSet<BTreeSet<String>>,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

/// Brute-force greedy: scan images in (most deps, id) order; each keeps
/// absorbing the later compatible image with the largest savings, ties to
/// the smaller image id; repeat whole passes until nothing merges.
pub fn greedy_oracle(instances: &[TaskInstance], size: &SizeModel) -> OracleResult {
    let grid = Grid::new(instances);
    let mut order: Vec<&TaskInstance> = instances.iter().collect();
    order.sort_by_key(|i| (std::cmp::Reverse(i.deps.len()), i.instance_id.clone()));
    let mut slots: Vec<Option<OracleImage>> = order
        .iter()
        .map(|i| {
            Some(OracleImage {
                masks: i.deps.iter().map(|d| (d.name.clone(), grid.mask(&d.name, &d.constraint))).collect(),
                constraints: i.deps.iter().map(|d| (d.name.clone(), d.constraint.clone())).collect(),
                ids: BTreeSet::from([i.instance_id.clone()]),
            })
        })
        .collect();
    let overhead = size.per_instance_overhead_bytes * instances.len() as u64;
    let bytes_before = slots.iter().flatten().map(|s| s.bytes(size)).sum::<u64>() + overhead;

    loop {
        let mut merged_any = false;
        for p in 0..slots.len() {
            while let Some(cur) = slots[p].as_ref() {
                let mut best: Option<(u64, String, usize)> = None;
                for (q, slot) in slots.iter().enumerate().skip(p + 1) {
                    let Some(other) = slot.as_ref() else { continue };
                    if !cur.compatible(other) {
                        continue;
                    }
                    let s = cur.savings(other, size);
                    let better = match &best {
                        None => true,
                        Some((bs, _, _)) if s > *bs => true,
                        Some((bs, bid, _)) if s == *bs => other.label() < *bid,
                        _ => false,
                    };
                    if better {
                        best = Some((s, other.label(), q));
                    }
                }
                let Some((_, _, q)) = best else { break };
                let other = slots[q].take().unwrap();
                slots[p].as_mut().unwrap().absorb(other);
                merged_any = true;
            }
        }
        if !merged_any {
            break;
        }
    }

    let images: Vec<OracleImage> = slots.into_iter().flatten().collect();
    OracleResult {
        groups: images.iter().map(|i| i.ids.clone()).collect(),
        bytes_before,
        bytes_after: images.iter().map(|i| i.bytes(size)).sum::<u64>() + overhead,
    }
}

/// Instances as dense mask rows over the corpus's package list; a missing
/// dependency is an all-ones mask.
pub struct DenseCorpus {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<u128>>,
}

impl DenseCorpus {
    pub fn new(instances: &[TaskInstance]) -> Self {
        let grid = Grid::new(instances);
        let names: Vec<String> = grid.points.keys().cloned().collect();
        let rows = instances
            .iter()
            .map(|i| {
                names
                    .iter()
                    .map(|n| i.dep(n).map_or(u128::MAX, |c| grid.mask(n, c)))
                    .collect()
            })
            .collect();
        DenseCorpus {
            ids: instances.iter().map(|i| i.instance_id.clone()).collect(),
            rows,
        }
    }

    pub fn jointly_compatible(&self, members: &[usize]) -> bool {
        (0..self.rows.first().map_or(0, Vec::len))
            .all(|k| members.iter().fold(u128::MAX, |m, &i| m & self.rows[i][k]) != 0)
    }
}

pub struct Exhaustive {
    /// Partitions into jointly compatible groups, i.e. every outcome some
    /// merge order can reach.
    pub partitions: u64,
    pub min_images: usize,
    pub contains_target: bool,
}

/// Enumerates every partition of the corpus into jointly compatible
/// groups and reports whether `target` is among them.
pub fn exhaustive_partitions(corpus: &DenseCorpus, target: &BTreeSet<BTreeSet<String>>) -> Exhaustive {
    let width = corpus.rows.first().map_or(0, Vec::len);
    let target: BTreeSet<BTreeSet<usize>> = target
        .iter()
        .map(|g| g.iter().map(|id| corpus.ids.iter().position(|x| x == id).unwrap()).collect())
        .collect();
    let mut out = Exhaustive {
        partitions: 0,
        min_images: usize::MAX,
        contains_target: false,
    };
    let mut groups: Vec<(Vec<u128>, Vec<usize>)> = Vec::new();

    fn go(
        i: usize,
        corpus: &DenseCorpus,
        width: usize,
        groups: &mut Vec<(Vec<u128>, Vec<usize>)>,
        target: &BTreeSet<BTreeSet<usize>>,
        out: &mut Exhaustive,
    ) {
        if i == corpus.rows.len() {
            out.partitions += 1;
            out.min_images = out.min_images.min(groups.len());
            if groups.len() == target.len() {
                let p: BTreeSet<BTreeSet<usize>> = groups.iter().map(|(_, m)| m.iter().copied().collect()).collect();
                out.contains_target |= &p == target;
            }
            return;
        }
        let row = &corpus.rows[i];
        for g in 0..groups.len() {
            let joined: Vec<u128> = (0..width).map(|k| groups[g].0[k] & row[k]).collect();
            if joined.iter().all(|&m| m != 0) {
                let saved = std::mem::replace(&mut groups[g].0, joined);
                groups[g].1.push(i);
                go(i + 1, corpus, width, groups, target, out);
                groups[g].1.pop();
                groups[g].0 = saved;
            }
        }
        groups.push((row.clone(), vec![i]));
        go(i + 1, corpus, width, groups, target, out);
        groups.pop();
    }

    go(0, corpus, width, &mut groups, &target, &mut out);
    out
}

pub fn release(idx: u64) -> Version {
    Version::new(vec![1 + idx / 10, idx % 10])
}

pub fn instance(id: &str, deps: Vec<DependencySpec>) -> TaskInstance {
    TaskInstance {
        instance_id: id.to_string(),
        repo: "fixture/repo".into(),
        base_commit: "0000000".into(),
        deps,
        fail_to_pass: vec![format!("{id}::test_fix")],
        pass_to_pass: vec![format!("{id}::test_keep")],
        gold_patch: format!("--- /dev/null\n+++ b/{id}.txt\n@@ -0,0 +1 @@\n+fixed\n"),
        test_cmd: "run-tests {tests}".into(),
        extra: Default::default(),
    }
}

/// Random corpus over `packages` names and releases 1.0 ..= 1.<releases-1>
/// (and 2.x past ten), with pins, bounded ranges, open ranges and `*`.
pub fn random_corpus(seed: u64, n: usize, packages: usize, releases: u64) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=packages.min(4));
            let mut names = BTreeSet::new();
            while names.len() < k {
                names.insert(rng.random_range(0..packages));
            }
            let deps = names
                .into_iter()
                .map(|p| {
                    let c = match rng.random_range(0..10) {
                        0..=2 => Constraint::Any,
                        3..=5 => Constraint::exact(release(rng.random_range(0..releases))),
                        6..=7 => {
                            let lo = rng.random_range(0..releases - 1);
                            let hi = rng.random_range(lo + 1..releases);
                            Constraint::range(Some(release(lo)), Some(release(hi))).unwrap()
                        }
                        8 => Constraint::range(Some(release(rng.random_range(0..releases))), None).unwrap(),
                        _ => Constraint::range(None, Some(release(rng.random_range(1..releases)))).unwrap(),
                    };
                    DependencySpec::new(format!("p{p}"), c)
                })
                .collect();
            instance(&format!("c{seed}-{i:02}"), deps)
        })
        .collect()
}
