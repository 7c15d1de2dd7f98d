//! Dotted-integer versions and the three-form constraint algebra
//! (`Exact`, half-open `Range`, `Any`) that image merging is built on.
//!
//! The algebra is closed under intersection: intersecting two constraints
//! yields another constraint, or `None` when no version satisfies both.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VersionError {
    #[error("empty version string")]
    Empty,
    #[error("invalid version component {component:?} in {input:?}")]
    InvalidComponent { input: String, component: String },
    #[error("unsupported constraint syntax {0:?}")]
    UnsupportedSyntax(String),
    #[error("empty range: lower bound {min} is not below upper bound {max}")]
    EmptyRange { min: Version, max: Version },
}

/// A version as a tuple of non-negative integers, e.g. `1.4.0`.
///
/// Components compare left to right; a missing trailing component counts
/// as zero, so `1.4` and `1.4.0` are the same version. The original
/// spelling is kept for display.
#[derive(Debug, Clone)]
pub struct Version {
    parts: Vec<u64>,
}

impl Version {
    pub fn new(parts: impl Into<Vec<u64>>) -> Self {
        let parts = parts.into();
        assert!(!parts.is_empty(), "version needs at least one component");
        Version { parts }
    }

    pub fn parse(input: &str) -> Result<Self, VersionError> {
        let input = input.trim();
        if input.is_empty() {
            return Err(VersionError::Empty);
        }
        let parts = input
            .split('.')
            .map(|c| {
                if c.is_empty() || !c.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(VersionError::InvalidComponent {
                        input: input.to_string(),
                        component: c.to_string(),
                    });
                }
                c.parse::<u64>().map_err(|_| VersionError::InvalidComponent {
                    input: input.to_string(),
                    component: c.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Version { parts })
    }

    pub fn components(&self) -> &[u64] {
        &self.parts
    }

    fn significant(&self) -> &[u64] {
        let end = self
            .parts
            .iter()
            .rposition(|&c| c != 0)
            .map_or(0, |i| i + 1);
        &self.parts[..end]
    }
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.significant() == other.significant()
    }
}

impl Eq for Version {}

impl Hash for Version {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.significant().hash(state);
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        let n = self.parts.len().max(other.parts.len());
        for i in 0..n {
            let a = self.parts.get(i).copied().unwrap_or(0);
            let b = other.parts.get(i).copied().unwrap_or(0);
            match a.cmp(&b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.parts.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Version {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Version::parse(s)
    }
}

impl Serialize for Version {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Version {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Version::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A set of acceptable versions.
///
/// `Range` is half-open: `min` inclusive, `max` exclusive, either side
/// optional. A range with both bounds must have `min < max`; use
/// [`Constraint::range`] to build one with that check.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Constraint {
    Any,
    Exact(Version),
    Range {
        min: Option<Version>,
        max: Option<Version>,
    },
}

impl Constraint {
    pub fn exact(v: Version) -> Self {
        Constraint::Exact(v)
    }

    /// Builds a range, rejecting empty ones. An unbounded range is `Any`.
    pub fn range(min: Option<Version>, max: Option<Version>) -> Result<Self, VersionError> {
        if let (Some(lo), Some(hi)) = (&min, &max) {
            if lo >= hi {
                return Err(VersionError::EmptyRange {
                    min: lo.clone(),
                    max: hi.clone(),
                });
            }
        }
        Ok(Constraint::Range { min, max }.normalized())
    }

    pub fn parse(input: &str) -> Result<Self, VersionError> {
        let input = input.trim();
        if input == "*" {
            return Ok(Constraint::Any);
        }
        if let Some(rest) = input.strip_prefix("==") {
            return Ok(Constraint::Exact(Version::parse(rest)?));
        }
        let mut min = None;
        let mut max = None;
        for clause in input.split(',') {
            let clause = clause.trim();
            if let Some(rest) = clause.strip_prefix(">=") {
                if min.replace(Version::parse(rest)?).is_some() {
                    return Err(VersionError::UnsupportedSyntax(input.to_string()));
                }
            } else if let Some(rest) = clause.strip_prefix('<') {
                if rest.starts_with('=') || max.replace(Version::parse(rest)?).is_some() {
                    return Err(VersionError::UnsupportedSyntax(input.to_string()));
                }
            } else {
                return Err(VersionError::UnsupportedSyntax(input.to_string()));
            }
        }
        Constraint::range(min, max)
    }

    fn normalized(self) -> Self {
        match self {
            Constraint::Range {
                min: None,
                max: None,
            } => Constraint::Any,
            other => other,
        }
    }

    /// Whether `v` is a member of this constraint's version set.
    pub fn allows(&self, v: &Version) -> bool {
        match self {
            Constraint::Any => true,
            Constraint::Exact(e) => e == v,
            Constraint::Range { min, max } => {
                min.as_ref().is_none_or(|lo| v >= lo) && max.as_ref().is_none_or(|hi| v < hi)
            }
        }
    }

    /// Exact set intersection. `None` means no version satisfies both.
    pub fn intersect(&self, other: &Constraint) -> Option<Constraint> {
        match (self, other) {
            (Constraint::Any, c) | (c, Constraint::Any) => Some(c.clone().normalized()),
            (Constraint::Exact(v), c) | (c, Constraint::Exact(v)) => {
                c.allows(v).then(|| Constraint::Exact(v.clone()))
            }
            (
                Constraint::Range { min: lo_a, max: hi_a },
                Constraint::Range { min: lo_b, max: hi_b },
            ) => {
                let min = match (lo_a, lo_b) {
                    (Some(a), Some(b)) => Some(a.max(b).clone()),
                    (a, b) => a.clone().or_else(|| b.clone()),
                };
                let max = match (hi_a, hi_b) {
                    (Some(a), Some(b)) => Some(a.min(b).clone()),
                    (a, b) => a.clone().or_else(|| b.clone()),
                };
                Constraint::range(min, max).ok()
            }
        }
    }

    /// Subset as version sets: every version `self` allows, `other` allows.
    pub fn is_subset_of(&self, other: &Constraint) -> bool {
        self.intersect(other).as_ref() == Some(&self.clone().normalized())
    }

    /// The largest version in `known` this constraint allows.
    pub fn max_satisfying<'a, I>(&self, known: I) -> Option<&'a Version>
    where
        I: IntoIterator<Item = &'a Version>,
    {
        known.into_iter().filter(|v| self.allows(v)).max()
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Any => f.write_str("*"),
            Constraint::Exact(v) => write!(f, "=={v}"),
            Constraint::Range { min, max } => match (min, max) {
                (Some(lo), Some(hi)) => write!(f, ">={lo},<{hi}"),
                (Some(lo), None) => write!(f, ">={lo}"),
                (None, Some(hi)) => write!(f, "<{hi}"),
                (None, None) => f.write_str("*"),
            },
        }
    }
}

impl FromStr for Constraint {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Constraint::parse(s)
    }
}

impl Serialize for Constraint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Constraint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Constraint::parse(&s).map_err(serde::de::Error::custom)
    }
}
