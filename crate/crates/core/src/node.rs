use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Identifier of a source node. Sources are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Anything that can send, receive or read a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Principal {
    Server,
    Source(NodeId),
}

impl Principal {
    pub fn source(self) -> Option<NodeId> {
        match self {
            Principal::Source(id) => Some(id),
            Principal::Server => None,
        }
    }
}

impl From<NodeId> for Principal {
    fn from(id: NodeId) -> Self {
        Principal::Source(id)
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Server => f.write_str("server"),
            Principal::Source(id) => id.fmt(f),
        }
    }
}

impl FromStr for Principal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "server" {
            return Ok(Principal::Server);
        }
        s.strip_prefix('s')
            .and_then(|n| n.parse().ok())
            .map(|n| Principal::Source(NodeId(n)))
            .ok_or_else(|| format!("not a principal: {s:?}"))
    }
}
