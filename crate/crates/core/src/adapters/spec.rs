use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rank::RankPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    QrLora,
    Lora,
    SvdLora,
    FullFt,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::QrLora => "qr_lora",
            Method::Lora => "lora",
            Method::SvdLora => "svd_lora",
            Method::FullFt => "full_ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qr_lora" => Ok(Method::QrLora),
            "lora" => Ok(Method::Lora),
            "svd_lora" => Ok(Method::SvdLora),
            "full_ft" => Ok(Method::FullFt),
            other => Err(Error::InvalidSpec(format!("unknown method `{other}`"))),
        }
    }
}

/// One of the four attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn as_str(&self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which layers receive adapters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerScope {
    All,
    /// The last `n` layers; all of them when the model has fewer.
    Last(usize),
    Layers(BTreeSet<usize>),
}

impl LayerScope {
    /// Concrete sorted layer indices for a model of `depth` layers.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        match self {
            LayerScope::All => Ok((0..depth).collect()),
            LayerScope::Last(n) => Ok((depth.saturating_sub(*n)..depth).collect()),
            LayerScope::Layers(set) => {
                if let Some(&bad) = set.iter().find(|&&l| l >= depth) {
                    return Err(Error::InvalidSpec(format!(
                        "layer index {bad} out of range for depth {depth}"
                    )));
                }
                Ok(set.iter().copied().collect())
            }
        }
    }
}

impl fmt::Display for LayerScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerScope::All => f.write_str("all"),
            LayerScope::Last(n) => write!(f, "last:{n}"),
            LayerScope::Layers(set) => {
                let parts: Vec<String> = set.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}

impl FromStr for LayerScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerScope::All);
        }
        if let Some(n) = s.strip_prefix("last:") {
            return n
                .parse()
                .map(LayerScope::Last)
                .map_err(|e| Error::InvalidSpec(format!("bad scope `{s}`: {e}")));
        }
        if s.is_empty() {
            return Ok(LayerScope::Layers(BTreeSet::new()));
        }
        s.split([';', ','])
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidSpec(format!("bad layer index `{p}`: {e}")))
            })
            .collect::<Result<BTreeSet<_>>>()
            .map(LayerScope::Layers)
    }
}

impl Serialize for LayerScope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerScope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::List(v) => Ok(LayerScope::Layers(v.into_iter().collect())),
        }
    }
}

fn default_rank() -> usize {
    2
}

fn default_alpha() -> f64 {
    2.0
}

fn default_top_k() -> usize {
    1
}

fn default_projections() -> BTreeSet<Projection> {
    [Projection::O].into_iter().collect()
}

/// Experiment configuration for one adapted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub method: Method,
    /// Rank rule (QR-LoRA only).
    #[serde(default)]
    pub policy: RankPolicy,
    /// Factor rank (LoRA and SVD-LoRA).
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Scale numerator for SVD-LoRA; the update is scaled by `alpha / rank`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Number of leading singular triplets seeding SVD-LoRA's factors.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "LayerScope::default_all")]
    pub layer_scope: LayerScope,
    #[serde(default = "default_projections")]
    pub projections: BTreeSet<Projection>,
}

impl LayerScope {
    fn default_all() -> Self {
        LayerScope::All
    }
}

impl AdapterSpec {
    pub fn qr_lora(policy: RankPolicy, layer_scope: LayerScope, projections: &[Projection]) -> Self {
        Self {
            method: Method::QrLora,
            policy,
            layer_scope,
            projections: projections.iter().copied().collect(),
            ..Self::full_ft()
        }
    }

    pub fn lora(rank: usize, layer_scope: LayerScope, projections: &[Projection]) -> Self {
        Self {
            method: Method::Lora,
            rank,
            layer_scope,
            projections: projections.iter().copied().collect(),
            ..Self::full_ft()
        }
    }

    pub fn svd_lora(
        rank: usize,
        top_k: usize,
        alpha: f64,
        layer_scope: LayerScope,
        projections: &[Projection],
    ) -> Self {
        Self {
            method: Method::SvdLora,
            rank,
            top_k,
            alpha,
            layer_scope,
            projections: projections.iter().copied().collect(),
            ..Self::full_ft()
        }
    }

    pub fn full_ft() -> Self {
        Self {
            method: Method::FullFt,
            policy: RankPolicy::default(),
            rank: default_rank(),
            alpha: default_alpha(),
            top_k: default_top_k(),
            layer_scope: LayerScope::All,
            projections: default_projections(),
        }
    }

    /// Checks the spec against a model of `depth` layers.
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.projections.is_empty() {
            return Err(Error::InvalidSpec("projection set is empty".into()));
        }
        self.layer_scope.resolve(depth)?;
        match self.method {
            Method::QrLora => {
                self.policy.validated()?;
            }
            Method::Lora | Method::SvdLora => {
                if self.rank == 0 {
                    return Err(Error::InvalidSpec("rank must be >= 1".into()));
                }
                if self.method == Method::SvdLora {
                    if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                        return Err(Error::InvalidSpec(format!("alpha {} must be > 0", self.alpha)));
                    }
                    if self.top_k == 0 || self.top_k > self.rank {
                        return Err(Error::InvalidSpec(format!(
                            "top_k {} must be in 1..={}",
                            self.top_k, self.rank
                        )));
                    }
                }
            }
            Method::FullFt => {}
        }
        Ok(())
    }

    /// `(layer, projection)` pairs that get wrapped, in canonical order.
    pub fn targets(&self, depth: usize) -> Result<Vec<(usize, Projection)>> {
        if self.method == Method::FullFt {
            return Ok(Vec::new());
        }
        let layers = self.layer_scope.resolve(depth)?;
        Ok(layers
            .into_iter()
            .flat_map(|l| self.projections.iter().map(move |&p| (l, p)))
            .collect())
    }

    /// Compact label, e.g. `qr_lora:energy:0.5` or `svd_lora:r2:k1:a2`.
    pub fn label(&self) -> String {
        match self.method {
            Method::QrLora => format!("qr_lora:{}", self.policy),
            Method::Lora => format!("lora:r{}", self.rank),
            Method::SvdLora => format!("svd_lora:r{}:k{}:a{}", self.rank, self.top_k, self.alpha),
            Method::FullFt => "full_ft".into(),
        }
    }

    pub fn projections_label(&self) -> String {
        self.projections
            .iter()
            .map(Projection::as_str)
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_resolution() {
        assert_eq!(LayerScope::Last(4).resolve(12).unwrap(), vec![8, 9, 10, 11]);
        assert_eq!(LayerScope::Last(4).resolve(2).unwrap(), vec![0, 1]);
        assert_eq!(LayerScope::All.resolve(3).unwrap(), vec![0, 1, 2]);
        let explicit: LayerScope = "0;2".parse().unwrap();
        assert_eq!(explicit.resolve(3).unwrap(), vec![0, 2]);
        assert!(explicit.resolve(2).is_err());
    }

    #[test]
    fn targets_cardinality() {
        let all = [Projection::Q, Projection::K, Projection::V, Projection::O];
        let spec = AdapterSpec::qr_lora(RankPolicy::default(), LayerScope::All, &all);
        assert_eq!(spec.targets(2).unwrap().len(), 8);
        let last = AdapterSpec::qr_lora(RankPolicy::default(), LayerScope::Last(4), &[Projection::O]);
        assert_eq!(last.targets(12).unwrap().len(), 4);
        assert!(AdapterSpec::full_ft().targets(12).unwrap().is_empty());
    }

    #[test]
    fn validation() {
        let mut s = AdapterSpec::lora(2, LayerScope::All, &[]);
        assert!(s.validate(2).is_err());
        s.projections.insert(Projection::V);
        assert!(s.validate(2).is_ok());
        s.rank = 0;
        assert!(s.validate(2).is_err());
        let svd = AdapterSpec::svd_lora(2, 3, 2.0, LayerScope::All, &[Projection::O]);
        assert!(svd.validate(2).is_err());
    }

    #[test]
    fn labels() {
        let s = AdapterSpec::svd_lora(2, 1, 2.0, LayerScope::All, &[Projection::Q, Projection::V]);
        assert_eq!(s.label(), "svd_lora:r2:k1:a2");
        assert_eq!(s.projections_label(), "q;v");
        assert_eq!(LayerScope::Last(4).to_string(), "last:4");
    }
}
