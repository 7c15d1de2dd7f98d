//! Unified diff parsing and strict application.
//!
//! Hunks must match their context exactly (no fuzz). A hunk may land at an
//! offset from its stated line if the exact text is found elsewhere, the
//! same tolerance `patch --fuzz=0` allows; the nearest match wins.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("malformed patch at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{path}: hunk #{hunk} does not apply")]
    HunkRejected { path: String, hunk: usize },
    #[error("{0}: no such file")]
    MissingFile(String),
    #[error("{0}: file already exists")]
    FileExists(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    fn old_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match l {
            HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
            HunkLine::Add(_) => None,
        })
    }

    fn new_lines(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match l {
            HunkLine::Context(s) | HunkLine::Add(s) => Some(s.as_str()),
            HunkLine::Remove(_) => None,
        })
    }
}

/// Changes to one file. `None` on a side means `/dev/null`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Patch {
    pub files: Vec<FilePatch>,
}

impl Patch {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn parse(text: &str) -> Result<Patch, PatchError> {
        parse(text)
    }
}

fn strip_prefix(path: &str) -> Option<String> {
    let path = path.split('\t').next().unwrap_or(path).trim_end();
    if path == "/dev/null" {
        return None;
    }
    let stripped = path
        .strip_prefix("a/")
        .or_else(|| path.strip_prefix("b/"))
        .unwrap_or(path);
    Some(stripped.to_string())
}

fn parse_range(s: &str, line: usize) -> Result<(usize, usize), PatchError> {
    let bad = || PatchError::Malformed {
        line,
        reason: format!("bad hunk range {s:?}"),
    };
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a, b),
        None => (s, "1"),
    };
    Ok((start.parse().map_err(|_| bad())?, len.parse().map_err(|_| bad())?))
}

fn parse_hunk_header(header: &str, line: usize) -> Result<Hunk, PatchError> {
    let malformed = || PatchError::Malformed {
        line,
        reason: format!("bad hunk header {header:?}"),
    };
    let body = header
        .strip_prefix("@@ ")
        .and_then(|rest| rest.split_once(" @@"))
        .map(|(ranges, _)| ranges)
        .ok_or_else(malformed)?;
    let (old, new) = body.split_once(' ').ok_or_else(malformed)?;
    let (old_start, old_len) = parse_range(old.strip_prefix('-').ok_or_else(malformed)?, line)?;
    let (new_start, new_len) = parse_range(new.strip_prefix('+').ok_or_else(malformed)?, line)?;
    Ok(Hunk {
        old_start,
        old_len,
        new_start,
        new_len,
        lines: Vec::new(),
    })
}

fn parse(text: &str) -> Result<Patch, PatchError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if !line.starts_with("--- ") {
            // git headers, index lines and prose are skipped
            i += 1;
            continue;
        }
        let old_path = strip_prefix(&line[4..]);
        let Some(plus) = lines.get(i + 1).filter(|l| l.starts_with("+++ ")) else {
            return Err(PatchError::Malformed {
                line: i + 2,
                reason: "expected +++ header".into(),
            });
        };
        let new_path = strip_prefix(&plus[4..]);
        if old_path.is_none() && new_path.is_none() {
            return Err(PatchError::Malformed {
                line: i + 1,
                reason: "both sides are /dev/null".into(),
            });
        }
        i += 2;
        let mut hunks = Vec::new();
        while i < lines.len() && lines[i].starts_with("@@") {
            let mut hunk = parse_hunk_header(lines[i], i + 1)?;
            i += 1;
            let (mut old_seen, mut new_seen) = (0, 0);
            while old_seen < hunk.old_len || new_seen < hunk.new_len {
                let Some(&l) = lines.get(i) else {
                    return Err(PatchError::Malformed {
                        line: i,
                        reason: "hunk ends early".into(),
                    });
                };
                match l.chars().next() {
                    Some(' ') => {
                        hunk.lines.push(HunkLine::Context(l[1..].to_string()));
                        old_seen += 1;
                        new_seen += 1;
                    }
                    // an empty line inside a hunk is an empty context line
                    None => {
                        hunk.lines.push(HunkLine::Context(String::new()));
                        old_seen += 1;
                        new_seen += 1;
                    }
                    Some('-') => {
                        hunk.lines.push(HunkLine::Remove(l[1..].to_string()));
                        old_seen += 1;
                    }
                    Some('+') => {
                        hunk.lines.push(HunkLine::Add(l[1..].to_string()));
                        new_seen += 1;
                    }
                    Some('\\') => {}
                    _ => {
                        return Err(PatchError::Malformed {
                            line: i + 1,
                            reason: format!("unexpected line in hunk: {l:?}"),
                        })
                    }
                }
                i += 1;
            }
            if old_seen != hunk.old_len || new_seen != hunk.new_len {
                return Err(PatchError::Malformed {
                    line: i,
                    reason: "hunk line counts do not match header".into(),
                });
            }
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            hunks.push(hunk);
        }
        files.push(FilePatch {
            old_path,
            new_path,
            hunks,
        });
    }
    Ok(Patch { files })
}

fn split_lines(content: &str) -> Vec<String> {
    content.lines().map(str::to_string).collect()
}

fn join_lines(lines: &[String]) -> String {
    let mut out = lines.join("\n");
    if !lines.is_empty() {
        out.push('\n');
    }
    out
}

fn find_match(lines: &[String], needle: &[&str], hint: usize) -> Option<usize> {
    if needle.is_empty() {
        return Some(hint.min(lines.len()));
    }
    if needle.len() > lines.len() {
        return None;
    }
    let matches_at = |pos: usize| {
        lines[pos..pos + needle.len()]
            .iter()
            .zip(needle)
            .all(|(a, b)| a == b)
    };
    let last = lines.len() - needle.len();
    let hint = hint.min(last);
    (0..=last.max(hint))
        .flat_map(|d| {
            let below = hint.checked_sub(d);
            let above = (d > 0).then_some(hint + d);
            below.into_iter().chain(above)
        })
        .filter(|&p| p <= last)
        .find(|&p| matches_at(p))
}

/// Applies one file's hunks to `content`, returning the new content.
pub fn apply_hunks(path: &str, content: &str, hunks: &[Hunk]) -> Result<String, PatchError> {
    let mut lines = split_lines(content);
    let mut delta: isize = 0;
    for (n, hunk) in hunks.iter().enumerate() {
        let old: Vec<&str> = hunk.old_lines().collect();
        let stated = if hunk.old_len == 0 {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        let hint = (stated as isize + delta).max(0) as usize;
        let pos = find_match(&lines, &old, hint).ok_or_else(|| PatchError::HunkRejected {
            path: path.to_string(),
            hunk: n + 1,
        })?;
        let new: Vec<String> = hunk.new_lines().map(str::to_string).collect();
        delta += new.len() as isize - old.len() as isize;
        lines.splice(pos..pos + old.len(), new);
    }
    Ok(join_lines(&lines))
}

/// Applies a patch to an in-memory file tree. Either every file applies or
/// the tree is left unchanged.
pub fn apply_to_tree(tree: &mut BTreeMap<String, String>, patch: &Patch) -> Result<(), PatchError> {
    let mut staged = tree.clone();
    for fp in &patch.files {
        match (&fp.old_path, &fp.new_path) {
            (None, Some(new)) => {
                if staged.contains_key(new) {
                    return Err(PatchError::FileExists(new.clone()));
                }
                let content = apply_hunks(new, "", &fp.hunks)?;
                staged.insert(new.clone(), content);
            }
            (Some(old), None) => {
                let current = staged
                    .get(old)
                    .ok_or_else(|| PatchError::MissingFile(old.clone()))?;
                let rest = apply_hunks(old, current, &fp.hunks)?;
                if !rest.is_empty() {
                    return Err(PatchError::HunkRejected {
                        path: old.clone(),
                        hunk: fp.hunks.len(),
                    });
                }
                staged.remove(old);
            }
            (Some(old), Some(new)) => {
                let current = staged
                    .get(old)
                    .ok_or_else(|| PatchError::MissingFile(old.clone()))?;
                let updated = apply_hunks(old, current, &fp.hunks)?;
                if old != new {
                    staged.remove(old);
                }
                staged.insert(new.clone(), updated);
            }
            (None, None) => unreachable!("rejected by the parser"),
        }
    }
    *tree = staged;
    Ok(())
}
