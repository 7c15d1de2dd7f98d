//! Duration distributions shared by the workload generator and the
//! simulated backend.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Pareto, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid distribution: {0}")]
pub struct InvalidDistribution(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DurationDist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    /// `ln X ~ Normal(mu, sigma)`.
    LogNormal { mu: f64, sigma: f64 },
    Pareto { scale: f64, shape: f64 },
}

impl DurationDist {
    pub fn validate(&self) -> Result<(), InvalidDistribution> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(InvalidDistribution(format!("{name} must be finite")))
            }
        };
        let positive = |name: &str, v: f64| {
            finite(name, v)?;
            if v > 0.0 {
                Ok(())
            } else {
                Err(InvalidDistribution(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            DurationDist::Constant { value } => positive("value", value),
            DurationDist::Uniform { low, high } => {
                positive("low", low)?;
                positive("high", high)?;
                if low < high {
                    Ok(())
                } else {
                    Err(InvalidDistribution(format!("low {low} must be below high {high}")))
                }
            }
            DurationDist::LogNormal { mu, sigma } => {
                finite("mu", mu)?;
                positive("sigma", sigma)
            }
            DurationDist::Pareto { scale, shape } => {
                positive("scale", scale)?;
                positive("shape", shape)
            }
        }
    }

    /// Builds a distribution from a name and `key=value` pairs, e.g.
    /// `lognormal` with `mu=4.094,sigma=1.0`.
    pub fn from_parts(name: &str, params: &str) -> Result<Self, InvalidDistribution> {
        let mut kv = BTreeMap::new();
        for pair in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| InvalidDistribution(format!("expected key=value, got {pair:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| InvalidDistribution(format!("{k}: not a number: {v:?}")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str, default: Option<f64>| {
            kv.get(k)
                .copied()
                .or(default)
                .ok_or_else(|| InvalidDistribution(format!("{name} needs parameter {k}")))
        };
        let dist = match name {
            "constant" => DurationDist::Constant {
                value: get("value", Some(60.0))?,
            },
            "uniform" => DurationDist::Uniform {
                low: get("low", None)?,
                high: get("high", None)?,
            },
            "lognormal" => DurationDist::LogNormal {
                mu: get("mu", Some(60f64.ln()))?,
                sigma: get("sigma", Some(1.0))?,
            },
            "pareto" => DurationDist::Pareto {
                scale: get("scale", None)?,
                shape: get("shape", None)?,
            },
            other => return Err(InvalidDistribution(format!("unknown distribution {other:?}"))),
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Draws one value. Callers must have validated the parameters.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DurationDist::Constant { value } => value,
            DurationDist::Uniform { low, high } => Uniform::new(low, high).expect("validated").sample(rng),
            DurationDist::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            DurationDist::Pareto { scale, shape } => Pareto::new(scale, shape).expect("validated").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DurationDist::Constant { value } => value,
            DurationDist::Uniform { low, high } => (low + high) / 2.0,
            DurationDist::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            DurationDist::Pareto { scale, shape } if shape > 1.0 => shape * scale / (shape - 1.0),
            DurationDist::Pareto { .. } => f64::INFINITY,
        }
    }
}

impl fmt::Display for DurationDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DurationDist::Constant { value } => write!(f, "constant(value={value})"),
            DurationDist::Uniform { low, high } => write!(f, "uniform(low={low},high={high})"),
            DurationDist::LogNormal { mu, sigma } => write!(f, "lognormal(mu={mu},sigma={sigma})"),
            DurationDist::Pareto { scale, shape } => write!(f, "pareto(scale={scale},shape={shape})"),
        }
    }
}

/// Stable 64-bit seed derived from a base seed and a list of labels, so
/// that per-item randomness does not depend on call order.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
