use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Where a steering vector is added to the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InjectionSite {
    /// Token plus position embedding, before the first block.
    Embedding,
    /// After the attention residual addition of layer `i`, before its MLP norm.
    AfterSelfAttn(usize),
    /// After the MLP residual addition of layer `i`.
    AfterFeedForward(usize),
    EveryLayerAttn,
    EveryLayerFF,
    /// After the final layer norm, right before the output projection.
    LmHead,
}

impl fmt::Display for InjectionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectionSite::Embedding => f.write_str("embedding"),
            InjectionSite::AfterSelfAttn(i) => write!(f, "attn:{i}"),
            InjectionSite::AfterFeedForward(i) => write!(f, "ff:{i}"),
            InjectionSite::EveryLayerAttn => f.write_str("every_attn"),
            InjectionSite::EveryLayerFF => f.write_str("every_ff"),
            InjectionSite::LmHead => f.write_str("lm_head"),
        }
    }
}

impl FromStr for InjectionSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let layer = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Injection(format!("bad layer index in site {s:?}")))
        };
        match s {
            "embedding" | "embed" => Ok(InjectionSite::Embedding),
            "every_attn" | "every_layer_self_attn" => Ok(InjectionSite::EveryLayerAttn),
            "every_ff" | "every_layer" => Ok(InjectionSite::EveryLayerFF),
            "lm_head" => Ok(InjectionSite::LmHead),
            _ => {
                if let Some(rest) = s.strip_prefix("attn:") {
                    Ok(InjectionSite::AfterSelfAttn(layer(rest)?))
                } else if let Some(rest) = s.strip_prefix("ff:") {
                    Ok(InjectionSite::AfterFeedForward(layer(rest)?))
                } else {
                    Err(Error::Injection(format!("unknown injection site {s:?}")))
                }
            }
        }
    }
}

impl TryFrom<String> for InjectionSite {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InjectionSite> for String {
    fn from(s: InjectionSite) -> String {
        s.to_string()
    }
}

/// Which sequence positions receive the vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timesteps {
    /// Position 0 (the BOS position) only.
    First,
    All,
}

impl FromStr for Timesteps {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first" => Ok(Timesteps::First),
            "all" => Ok(Timesteps::All),
            other => Err(Error::Injection(format!("unknown timesteps {other:?}"))),
        }
    }
}

impl fmt::Display for Timesteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timesteps::First => "first",
            Timesteps::All => "all",
        })
    }
}

/// Injection sites, timesteps and steering dimensionality. Vectors with
/// `steer_dim < d_model` are up-projected by the fixed matrix generated from
/// `projection_seed`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub sites: Vec<InjectionSite>,
    pub timesteps: Timesteps,
    pub steer_dim: usize,
    #[serde(default)]
    pub projection_seed: u64,
}

impl InjectionSpec {
    pub fn new(sites: Vec<InjectionSite>, timesteps: Timesteps, steer_dim: usize) -> Self {
        let mut sites = sites;
        sites.sort();
        sites.dedup();
        InjectionSpec {
            sites,
            timesteps,
            steer_dim,
            projection_seed: 0,
        }
    }

    pub fn single(site: InjectionSite, timesteps: Timesteps, steer_dim: usize) -> Self {
        Self::new(vec![site], timesteps, steer_dim)
    }

    /// Parses `"attn:2"` or composites such as `"every_ff+every_attn"`.
    pub fn parse_sites(s: &str) -> Result<Vec<InjectionSite>> {
        let mut sites = s
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<InjectionSite>>>()?;
        sites.sort();
        sites.dedup();
        Ok(sites)
    }

    pub fn sites_label(&self) -> String {
        self.sites
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Injection("no injection sites".into()));
        }
        for s in &self.sites {
            if let InjectionSite::AfterSelfAttn(i) | InjectionSite::AfterFeedForward(i) = s {
                if *i >= cfg.n_layers {
                    return Err(Error::Injection(format!(
                        "site {s} outside {} layers",
                        cfg.n_layers
                    )));
                }
            }
        }
        if self.steer_dim == 0 {
            return Err(Error::Injection("steer_dim must be at least 1".into()));
        }
        if self.steer_dim > cfg.d_model {
            return Err(Error::SteerDimTooLarge {
                steer_dim: self.steer_dim,
                d_model: cfg.d_model,
            });
        }
        Ok(())
    }

    pub fn at_embedding(&self) -> bool {
        self.sites.contains(&InjectionSite::Embedding)
    }

    pub fn after_attn(&self, layer: usize) -> bool {
        self.sites.iter().any(|s| {
            matches!(s, InjectionSite::EveryLayerAttn)
                || *s == InjectionSite::AfterSelfAttn(layer)
        })
    }

    pub fn after_ff(&self, layer: usize) -> bool {
        self.sites.iter().any(|s| {
            matches!(s, InjectionSite::EveryLayerFF) || *s == InjectionSite::AfterFeedForward(layer)
        })
    }

    pub fn at_lm_head(&self) -> bool {
        self.sites.contains(&InjectionSite::LmHead)
    }

    /// Whether any site lives inside the block stack (as opposed to only the
    /// embedding or LM head), which decides the default learning rate.
    pub fn is_single_in_stack(&self) -> bool {
        self.sites.len() == 1
            && matches!(
                self.sites[0],
                InjectionSite::AfterSelfAttn(_) | InjectionSite::AfterFeedForward(_)
            )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_round_trip() {
        for s in [
            InjectionSite::Embedding,
            InjectionSite::AfterSelfAttn(3),
            InjectionSite::AfterFeedForward(0),
            InjectionSite::EveryLayerAttn,
            InjectionSite::EveryLayerFF,
            InjectionSite::LmHead,
        ] {
            assert_eq!(s.to_string().parse::<InjectionSite>().unwrap(), s);
        }
        assert!("attn:x".parse::<InjectionSite>().is_err());
        assert!("middle".parse::<InjectionSite>().is_err());
    }

    #[test]
    fn composite_parsing_sorts_and_dedups() {
        let sites = InjectionSpec::parse_sites("every_attn+embedding+every_attn").unwrap();
        assert_eq!(sites, vec![InjectionSite::Embedding, InjectionSite::EveryLayerAttn]);
    }

    #[test]
    fn validation() {
        let cfg = ModelConfig::default();
        let ok = InjectionSpec::single(InjectionSite::AfterSelfAttn(3), Timesteps::All, 64);
        assert!(ok.validate(&cfg).is_ok());
        let bad_layer = InjectionSpec::single(InjectionSite::AfterSelfAttn(4), Timesteps::All, 64);
        assert!(bad_layer.validate(&cfg).is_err());
        let bad_dim = InjectionSpec::single(InjectionSite::LmHead, Timesteps::All, 65);
        assert!(matches!(bad_dim.validate(&cfg), Err(Error::SteerDimTooLarge { .. })));
        let zero = InjectionSpec::single(InjectionSite::LmHead, Timesteps::All, 0);
        assert!(zero.validate(&cfg).is_err());
    }

    #[test]
    fn json_shape() {
        let spec = InjectionSpec::single(InjectionSite::AfterSelfAttn(2), Timesteps::First, 16);
        let js = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            js,
            r#"{"sites":["attn:2"],"timesteps":"first","steer_dim":16,"projection_seed":0}"#
        );
        assert_eq!(serde_json::from_str::<InjectionSpec>(&js).unwrap(), spec);
    }
}
