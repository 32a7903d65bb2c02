use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Mlp,
    AttnHead,
}

/// One vertex of the component graph: an attention head or an MLP layer.
///
/// Ordering is canonical: by layer, then MLP before heads, then head index.
/// The string form is `attn:{layer}:{head}` or `mlp:{layer}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentId {
    Mlp { layer: usize },
    AttnHead { layer: usize, head: usize },
}

/// Component sets iterate in canonical order.
pub type ComponentSet = BTreeSet<ComponentId>;

impl ComponentId {
    pub fn mlp(layer: usize) -> Self {
        Self::Mlp { layer }
    }

    pub fn head(layer: usize, head: usize) -> Self {
        Self::AttnHead { layer, head }
    }

    pub fn kind(&self) -> ComponentKind {
        match self {
            Self::Mlp { .. } => ComponentKind::Mlp,
            Self::AttnHead { .. } => ComponentKind::AttnHead,
        }
    }

    pub fn layer(&self) -> usize {
        match *self {
            Self::Mlp { layer } | Self::AttnHead { layer, .. } => layer,
        }
    }

    pub fn head_index(&self) -> Option<usize> {
        match *self {
            Self::Mlp { .. } => None,
            Self::AttnHead { head, .. } => Some(head),
        }
    }

    fn sort_key(&self) -> (usize, u8, usize) {
        match *self {
            Self::Mlp { layer } => (layer, 0, 0),
            Self::AttnHead { layer, head } => (layer, 1, head),
        }
    }

    pub fn is_valid_for(&self, config: &ModelConfig) -> bool {
        match *self {
            Self::Mlp { layer } => layer < config.n_layers,
            Self::AttnHead { layer, head } => layer < config.n_layers && head < config.n_heads,
        }
    }

    /// Position in [`all_components`] order.
    pub fn index(&self, config: &ModelConfig) -> Result<usize> {
        if !self.is_valid_for(config) {
            return Err(Error::Input(format!(
                "component {self} does not exist in a {}-layer, {}-head model",
                config.n_layers, config.n_heads
            )));
        }
        Ok(match *self {
            Self::Mlp { layer } => layer * (config.n_heads + 1),
            Self::AttnHead { layer, head } => layer * (config.n_heads + 1) + 1 + head,
        })
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Mlp { layer } => write!(f, "mlp:{layer}"),
            Self::AttnHead { layer, head } => write!(f, "attn:{layer}:{head}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed component id {s:?}"));
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        match parts[..] {
            ["mlp", l] => Ok(Self::mlp(num(l)?)),
            ["attn", l, h] => Ok(Self::head(num(l)?, num(h)?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every component of a model, in canonical order.
pub fn all_components(config: &ModelConfig) -> Vec<ComponentId> {
    let mut out = Vec::with_capacity(config.n_components());
    for layer in 0..config.n_layers {
        out.push(ComponentId::mlp(layer));
        for head in 0..config.n_heads {
            out.push(ComponentId::head(layer, head));
        }
    }
    out
}

/// Checks that every member exists in `config`.
pub fn validate_set<'a>(config: &ModelConfig, set: impl IntoIterator<Item = &'a ComponentId>) -> Result<()> {
    for c in set {
        c.index(config)?;
    }
    Ok(())
}

/// Counts of `(heads, mlps)` in a set.
pub fn kind_counts<'a>(set: impl IntoIterator<Item = &'a ComponentId>) -> (usize, usize) {
    set.into_iter().fold((0, 0), |(h, m), c| match c.kind() {
        ComponentKind::AttnHead => (h + 1, m),
        ComponentKind::Mlp => (h, m + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    #[test]
    fn canonical_order_and_index_agree() {
        let cfg = ModelConfig::desk(10, 8);
        let all = all_components(&cfg);
        assert_eq!(all.len(), 36);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(&cfg).unwrap(), i);
        }
        assert!(ComponentId::mlp(1) < ComponentId::head(1, 0));
        assert!(ComponentId::head(0, 7) < ComponentId::mlp(1));
    }

    #[test]
    fn string_round_trip() {
        for s in ["mlp:3", "attn:2:7"] {
            let c: ComponentId = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("attn:1".parse::<ComponentId>().is_err());
        assert!("mlp:x".parse::<ComponentId>().is_err());
    }

    #[test]
    fn out_of_range_components_are_rejected() {
        let cfg = ModelConfig::desk(10, 8);
        assert!(ComponentId::mlp(4).index(&cfg).is_err());
        assert!(ComponentId::head(0, 8).index(&cfg).is_err());
    }
}
