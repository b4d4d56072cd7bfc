//! Rank selection from the magnitudes of a pivoted-QR diagonal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rule mapping `|diag(R)|` to a retained rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Smallest `r` with `Σ_{i<r} dᵢ² ≥ τ Σ dᵢ²`.
    Energy(f64),
    /// Smallest `r` with `Σ_{i<r} |dᵢ| ≥ τ Σ |dᵢ|`.
    AbsCumulative(f64),
    /// Number of entries with `|dᵢ| > τ |d₀|`.
    RelativeMagnitude(f64),
    /// `min(r, len)`.
    Fixed(usize),
}

impl RankPolicy {
    pub fn energy(tau: f64) -> Result<Self> {
        Self::Energy(tau).validated()
    }

    pub fn abs_cumulative(tau: f64) -> Result<Self> {
        Self::AbsCumulative(tau).validated()
    }

    pub fn relative_magnitude(tau: f64) -> Result<Self> {
        Self::RelativeMagnitude(tau).validated()
    }

    pub fn fixed(r: usize) -> Result<Self> {
        Self::Fixed(r).validated()
    }

    pub fn validated(self) -> Result<Self> {
        match self {
            Self::Energy(t) | Self::AbsCumulative(t) | Self::RelativeMagnitude(t) => {
                if t > 0.0 && t < 1.0 {
                    Ok(self)
                } else {
                    Err(Error::InvalidPolicy(format!("tau {t} not in (0, 1)")))
                }
            }
            Self::Fixed(0) => Err(Error::InvalidPolicy("fixed rank must be >= 1".into())),
            Self::Fixed(_) => Ok(self),
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            Self::Energy(t) | Self::AbsCumulative(t) | Self::RelativeMagnitude(t) => Some(t),
            Self::Fixed(_) => None,
        }
    }

    /// Same rule family with a different threshold. `Fixed` is returned unchanged.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        match self {
            Self::Energy(_) => Self::energy(tau),
            Self::AbsCumulative(_) => Self::abs_cumulative(tau),
            Self::RelativeMagnitude(_) => Self::relative_magnitude(tau),
            Self::Fixed(_) => Ok(*self),
        }
    }
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self::Energy(0.5)
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Energy(t) => write!(f, "energy:{t}"),
            Self::AbsCumulative(t) => write!(f, "abs:{t}"),
            Self::RelativeMagnitude(t) => write!(f, "relmag:{t}"),
            Self::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidPolicy(format!("expected `kind:value`, got `{s}`")))?;
        let tau = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidPolicy(format!("bad threshold `{value}`: {e}")))
        };
        match kind.trim() {
            "energy" => Self::energy(tau()?),
            "abs" => Self::abs_cumulative(tau()?),
            "relmag" => Self::relative_magnitude(tau()?),
            "fixed" => Self::fixed(
                value
                    .trim()
                    .parse()
                    .map_err(|e| Error::InvalidPolicy(format!("bad rank `{value}`: {e}")))?,
            ),
            other => Err(Error::InvalidPolicy(format!("unknown policy `{other}`"))),
        }
    }
}

impl Serialize for RankPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RankPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Picks the retained rank for a diagonal produced by pivoted QR.
///
/// The result is always in `1..=diag.len()`. Magnitudes must be
/// non-increasing; ratio-based policies reject an all-zero diagonal.
pub fn select_rank<T: Scalar>(diag: &[T], policy: RankPolicy) -> Result<usize> {
    let policy = policy.validated()?;
    if diag.is_empty() {
        return Err(Error::EmptyDiagonal);
    }
    let mags: Vec<T> = diag.iter().map(|d| d.abs()).collect();
    if let Some(i) = mags.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i,
            col: i,
            value: mags[i].as_f64(),
        });
    }
    if let Some(i) = mags.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::NonMonotoneDiagonal {
            index: i + 1,
            prev: mags[i].as_f64(),
            next: mags[i + 1].as_f64(),
        });
    }
    let n = mags.len();
    if let RankPolicy::Fixed(r) = policy {
        return Ok(r.min(n));
    }
    if mags[0] == T::zero() {
        return Err(Error::ZeroDiagonal);
    }
    let tau = T::lit(policy.tau().expect("ratio policy"));
    let rank = match policy {
        RankPolicy::Energy(_) => smallest_prefix(&mags.iter().map(|&d| d * d).collect::<Vec<_>>(), tau),
        RankPolicy::AbsCumulative(_) => smallest_prefix(&mags, tau),
        RankPolicy::RelativeMagnitude(_) => {
            let cut = tau * mags[0];
            mags.iter().take_while(|&&d| d > cut).count()
        }
        RankPolicy::Fixed(_) => unreachable!(),
    };
    Ok(rank.clamp(1, n))
}

fn smallest_prefix<T: Scalar>(weights: &[T], tau: T) -> usize {
    let total: T = weights.iter().copied().sum();
    let mut acc = T::zero();
    for (i, &w) in weights.iter().enumerate() {
        acc = acc + w;
        if acc / total >= tau {
            return i + 1;
        }
    }
    weights.len()
}
