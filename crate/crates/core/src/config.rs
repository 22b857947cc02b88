//! Scenario configuration: a flat TOML file. Unknown keys are rejected.
//!
//! ```toml
//! n_sources = 3
//! values = [3, 9, 14]
//! modulus = 32
//! seed = 7
//! mode = "direct"          # or "strict-relay"
//! ```

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{RelayMode, RoundOptions, ServerBehavior};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
}

impl ConfigError {
    pub fn field(field: &'static str, message: impl fmt::Display) -> Self {
        ConfigError::Field {
            field,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryKind {
    #[default]
    None,
    SemiHonest,
    Collusion,
    ServerProbe,
    LinkCompromise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_sources: u32,
    /// Explicit inputs `x_1..x_N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<u64>>,
    /// Half-open `[lo, hi)` range to sample inputs from instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<[u64; 2]>,
    pub modulus: u64,
    #[serde(default = "default_total_keys")]
    pub total_keys: usize,
    #[serde(default = "default_source_keys")]
    pub source_keys: usize,
    #[serde(default = "default_edge_probability")]
    pub edge_probability: f64,
    /// Explicit source-source edges; overrides `edge_probability`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[u32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregator_links: Option<Vec<u32>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: RelayMode,
    #[serde(default)]
    pub adversary: AdversaryKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adversary_nodes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversary_target: Option<u32>,
    #[serde(default)]
    pub link_break_prob: f64,
    #[serde(default = "default_true")]
    pub probe_defense: bool,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
}

fn default_total_keys() -> usize {
    100
}
fn default_source_keys() -> usize {
    30
}
fn default_edge_probability() -> f64 {
    1.0
}
/// The parser's message prefixed with the offending line, so type errors
/// still name the key.
fn parse_message(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return e.message().to_string();
    };
    let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
    let end = text[span.start..]
        .find('\n')
        .map_or(text.len(), |i| span.start + i);
    let line = text[..start].matches('\n').count() + 1;
    format!("line {line} `{}`: {}", text[start..end].trim(), e.message())
}

fn default_true() -> bool {
    true
}
fn default_rounds() -> u32 {
    1
}

pub enum TopologySpec<'a> {
    Random(f64),
    Explicit {
        edges: &'a [[u32; 2]],
        aggregator_links: &'a [u32],
    },
}

impl ScenarioConfig {
    /// Minimal valid config with explicit inputs and defaults elsewhere.
    pub fn with_values(values: Vec<u64>, modulus: u64, seed: u64) -> Self {
        ScenarioConfig {
            n_sources: values.len() as u32,
            values: Some(values),
            value_range: None,
            modulus,
            total_keys: default_total_keys(),
            source_keys: default_source_keys(),
            edge_probability: default_edge_probability(),
            edges: None,
            aggregator_links: None,
            seed,
            mode: RelayMode::Direct,
            adversary: AdversaryKind::None,
            adversary_nodes: Vec::new(),
            adversary_target: None,
            link_break_prob: 0.0,
            probe_defense: true,
            rounds: 1,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(parse_message(text, &e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n_sources;
        if n == 0 {
            return Err(ConfigError::field("n_sources", "must be at least 1"));
        }
        if self.modulus < 2 {
            return Err(ConfigError::field("modulus", "must be at least 2"));
        }
        match (&self.values, &self.value_range) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::field(
                    "value_range",
                    "give either `values` or `value_range`, not both",
                ))
            }
            (None, None) => {
                return Err(ConfigError::field(
                    "values",
                    "missing; give `values` or `value_range`",
                ))
            }
            (Some(values), None) => {
                if values.len() != n as usize {
                    return Err(ConfigError::field(
                        "values",
                        format!("has {} entries but n_sources = {n}", values.len()),
                    ));
                }
                let sum: u128 = values.iter().map(|&v| v as u128).sum();
                if sum >= self.modulus as u128 {
                    return Err(ConfigError::field(
                        "values",
                        format!("sum {sum} must be below modulus {}", self.modulus),
                    ));
                }
            }
            (None, Some([lo, hi])) => {
                if lo >= hi {
                    return Err(ConfigError::field("value_range", "needs lo < hi"));
                }
                if (hi - 1) as u128 * n as u128 >= self.modulus as u128 {
                    return Err(ConfigError::field(
                        "value_range",
                        "n_sources * (hi - 1) must be below modulus",
                    ));
                }
            }
        }
        if self.source_keys == 0 || self.source_keys >= self.total_keys {
            return Err(ConfigError::field(
                "source_keys",
                format!("needs 0 < source_keys < total_keys = {}", self.total_keys),
            ));
        }
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return Err(ConfigError::field("edge_probability", "must lie in [0, 1]"));
        }
        if self.edges.is_some() != self.aggregator_links.is_some() {
            return Err(ConfigError::field(
                "aggregator_links",
                "explicit topologies need both `edges` and `aggregator_links`",
            ));
        }
        if self.rounds == 0 {
            return Err(ConfigError::field("rounds", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.link_break_prob) {
            return Err(ConfigError::field("link_break_prob", "must lie in [0, 1]"));
        }
        if let Some(bad) = self.adversary_nodes.iter().find(|&&s| s == 0 || s > n) {
            return Err(ConfigError::field(
                "adversary_nodes",
                format!("s{bad} is not a source in 1..={n}"),
            ));
        }
        if let Some(t) = self.adversary_target.filter(|&t| t == 0 || t > n) {
            return Err(ConfigError::field(
                "adversary_target",
                format!("s{t} is not a source in 1..={n}"),
            ));
        }
        Ok(())
    }

    pub fn topology_spec(&self) -> TopologySpec<'_> {
        match (&self.edges, &self.aggregator_links) {
            (Some(edges), Some(links)) => TopologySpec::Explicit {
                edges,
                aggregator_links: links,
            },
            _ => TopologySpec::Random(self.edge_probability),
        }
    }

    /// The inputs, sampling them from `value_range` when not explicit.
    pub fn resolve_values(&self) -> Vec<u64> {
        match (&self.values, self.value_range) {
            (Some(values), _) => values.clone(),
            (None, Some([lo, hi])) => {
                let mut rng = rng::derive(self.seed, Stream::Values, 0);
                (0..self.n_sources).map(|_| rng.gen_range(lo..hi)).collect()
            }
            (None, None) => Vec::new(),
        }
    }
}

impl From<&ScenarioConfig> for RoundOptions {
    fn from(config: &ScenarioConfig) -> Self {
        let probing = config.adversary == AdversaryKind::ServerProbe;
        RoundOptions {
            mode: config.mode,
            server: if probing {
                ServerBehavior::Probe
            } else {
                ServerBehavior::Honest
            },
            defense: config.probe_defense,
            ..RoundOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: ConfigError) -> &'static str {
        match err {
            ConfigError::Field { field, .. } => field,
            other => panic!("expected field error, got {other:?}"),
        }
    }

    #[test]
    fn parses_minimal_config() {
        let c = ScenarioConfig::from_toml_str(
            "n_sources = 3\nvalues = [3, 9, 14]\nmodulus = 32\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(c.values, Some(vec![3, 9, 14]));
        assert_eq!(c.mode, RelayMode::Direct);
        assert_eq!((c.total_keys, c.source_keys, c.rounds), (100, 30, 1));
        assert!(c.probe_defense);
    }

    #[test]
    fn parses_every_field() {
        let text = r#"
n_sources = 3
value_range = [0, 10]
modulus = 64
total_keys = 20
source_keys = 5
edges = [[1, 2], [2, 3]]
aggregator_links = [3]
seed = 11
mode = "strict-relay"
adversary = "link-compromise"
adversary_nodes = [1, 3]
adversary_target = 2
link_break_prob = 0.25
probe_defense = false
rounds = 4
"#;
        let c = ScenarioConfig::from_toml_str(text).unwrap();
        assert_eq!(c.mode, RelayMode::StrictRelay);
        assert_eq!(c.adversary, AdversaryKind::LinkCompromise);
        let vals = c.resolve_values();
        assert_eq!(vals.len(), 3);
        assert!(vals.iter().all(|&v| v < 10));
        assert_eq!(vals, c.resolve_values());
        let again = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err =
            ScenarioConfig::from_toml_str("n_sources = 1\nvalues=[1]\nmodulus = 4\nbogus = 1\n")
                .unwrap_err();
        assert!(
            matches!(&err, ConfigError::Parse(m) if m.contains("bogus")),
            "{err}"
        );
    }

    #[test]
    fn type_error_names_the_line() {
        let err = ScenarioConfig::from_toml_str("n_sources = 1\nvalues=[1]\nmodulus = \"big\"\n")
            .unwrap_err();
        assert!(
            matches!(&err, ConfigError::Parse(m) if m.contains("line 3 `modulus")),
            "{err}"
        );
    }

    #[test]
    fn missing_required_field_is_named() {
        let err = ScenarioConfig::from_toml_str("n_sources = 1\nvalues=[1]\n").unwrap_err();
        assert!(err.to_string().contains("modulus"), "{err}");
    }

    #[test]
    fn field_level_diagnostics() {
        let base = ScenarioConfig::with_values(vec![1, 2, 3], 32, 0);
        let check = |f: &dyn Fn(&mut ScenarioConfig), field: &str| {
            let mut c = base.clone();
            f(&mut c);
            assert_eq!(field_of(c.validate().unwrap_err()), field);
        };
        check(&|c| c.n_sources = 0, "n_sources");
        check(&|c| c.modulus = 1, "modulus");
        check(&|c| c.values = Some(vec![1, 2]), "values");
        check(&|c| c.values = Some(vec![10, 10, 12]), "values");
        check(&|c| c.values = None, "values");
        check(&|c| c.value_range = Some([0, 5]), "value_range");
        check(
            &|c| {
                c.values = None;
                c.value_range = Some([5, 5]);
            },
            "value_range",
        );
        check(
            &|c| {
                c.values = None;
                c.value_range = Some([0, 12]);
            },
            "value_range",
        );
        check(&|c| c.source_keys = 100, "source_keys");
        check(&|c| c.source_keys = 0, "source_keys");
        check(&|c| c.edge_probability = 1.5, "edge_probability");
        check(&|c| c.edges = Some(vec![[1, 2]]), "aggregator_links");
        check(&|c| c.rounds = 0, "rounds");
        check(&|c| c.link_break_prob = -0.1, "link_break_prob");
        check(&|c| c.adversary_nodes = vec![4], "adversary_nodes");
        check(&|c| c.adversary_target = Some(0), "adversary_target");
        base.validate().unwrap();
    }
}
