//! Deterministic simulated network.
//!
//! Links are lossless and FIFO and each delivery is one step. Nothing is
//! really encrypted: a sealed message is readable by exactly the principals
//! that hold its session key, and a plaintext message by everyone. Every
//! delivery is appended to the transcript together with that reader set,
//! which is what the adversary module works from.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig, TopologySpec};
use crate::keying::{KeyBankConfig, KeyDeployment, KeyId};
use crate::node::{NodeId, Principal};
use crate::protocol::{self, ProtocolMessage, RelayMode, RoundOptions, RoundOutcome, RoundRecord};
use crate::rng::{self, Stream};
use crate::securesum::{Modulus, PrivateValue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no link between {0} and {1}")]
    NoLink(Principal, Principal),
    #[error("strict-relay mode forbids direct delivery from {0} to {1}")]
    RelayViolation(Principal, Principal),
    #[error("key {0} was never established")]
    UnknownKey(KeyId),
    #[error("{holder} does not hold key {key}")]
    KeyNotHeld { holder: Principal, key: KeyId },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("a topology needs at least one source")]
    Empty,
    #[error("{0} is not a source in 1..={1}")]
    UnknownSource(u32, u32),
    #[error("self-loop at s{0}")]
    SelfLoop(u32),
    #[error("{0} cannot reach the aggregator")]
    Unreachable(NodeId),
}

/// Undirected source graph plus the set of sources with a direct link to
/// the aggregator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n_sources: u32,
    edges: BTreeSet<(NodeId, NodeId)>,
    aggregator_links: BTreeSet<NodeId>,
    /// Sources whose aggregator link was added to restore connectivity.
    augmented: Vec<NodeId>,
    adjacency: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Builds and validates a topology. Every source must reach the
    /// aggregator, directly or through other sources.
    pub fn from_edges(
        n_sources: u32,
        edges: impl IntoIterator<Item = (u32, u32)>,
        aggregator_links: impl IntoIterator<Item = u32>,
    ) -> Result<Self, TopologyError> {
        if n_sources == 0 {
            return Err(TopologyError::Empty);
        }
        let check = |s: u32| {
            if (1..=n_sources).contains(&s) {
                Ok(NodeId(s))
            } else {
                Err(TopologyError::UnknownSource(s, n_sources))
            }
        };
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            let (a, b) = (check(a)?, check(b)?);
            if a == b {
                return Err(TopologyError::SelfLoop(a.0));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let links = aggregator_links
            .into_iter()
            .map(check)
            .collect::<Result<BTreeSet<_>, _>>()?;
        let topo = Self::assemble(n_sources, set, links, Vec::new());
        if let Some(bad) = topo.sources().find(|&s| !topo.reaches_aggregator(s)) {
            return Err(TopologyError::Unreachable(bad));
        }
        Ok(topo)
    }

    fn assemble(
        n_sources: u32,
        edges: BTreeSet<(NodeId, NodeId)>,
        aggregator_links: BTreeSet<NodeId>,
        augmented: Vec<NodeId>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); n_sources as usize + 1];
        for &(a, b) in &edges {
            adjacency[a.0 as usize].push(b);
            adjacency[b.0 as usize].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Topology {
            n_sources,
            edges,
            aggregator_links,
            augmented,
            adjacency,
        }
    }

    pub fn n_sources(&self) -> u32 {
        self.n_sources
    }

    pub fn sources(&self) -> impl Iterator<Item = NodeId> + Clone {
        (1..=self.n_sources).map(NodeId)
    }

    pub fn edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.edges
    }

    pub fn aggregator_links(&self) -> &BTreeSet<NodeId> {
        &self.aggregator_links
    }

    pub fn augmented(&self) -> &[NodeId] {
        &self.augmented
    }

    /// Source neighbours in ascending order.
    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        self.adjacency.get(id.0 as usize).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.neighbors(id).len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        (1..=self.n_sources).contains(&id.0)
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn reaches_aggregator(&self, id: NodeId) -> bool {
        if !self.contains(id) {
            return false;
        }
        let mut seen = BTreeSet::from([id]);
        let mut queue = VecDeque::from([id]);
        while let Some(n) = queue.pop_front() {
            if self.aggregator_links.contains(&n) {
                return true;
            }
            for &m in self.neighbors(n) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        false
    }

    /// Checks the connectivity invariants: every source has a source
    /// neighbour or an aggregator link, and every source reaches the
    /// aggregator.
    pub fn validate(&self) -> Result<(), TopologyError> {
        for s in self.sources() {
            if !self.reaches_aggregator(s) {
                return Err(TopologyError::Unreachable(s));
            }
        }
        Ok(())
    }

    fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for s in self.sources() {
            if !seen.insert(s) {
                continue;
            }
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(n) = queue.pop_front() {
                for &m in self.neighbors(n) {
                    if seen.insert(m) {
                        comp.push(m);
                        queue.push_back(m);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Random topology: each source pair and each source-aggregator link exists
/// independently with probability `p`. A connected component with no
/// aggregator link then gets one, at its lowest-numbered source; with
/// `p = 0` that links every source to the aggregator.
pub fn generate_topology<R: Rng + ?Sized>(
    n: u32,
    p: f64,
    rng: &mut R,
) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    let p = p.clamp(0.0, 1.0);
    let mut edges = BTreeSet::new();
    for a in 1..=n {
        for b in a + 1..=n {
            if rng.gen_bool(p) {
                edges.insert((NodeId(a), NodeId(b)));
            }
        }
    }
    let mut links = BTreeSet::new();
    for s in 1..=n {
        if rng.gen_bool(p) {
            links.insert(NodeId(s));
        }
    }
    let draft = Topology::assemble(n, edges, links, Vec::new());
    let mut augmented = Vec::new();
    for comp in draft.components() {
        if !comp.iter().any(|s| draft.aggregator_links.contains(s)) {
            augmented.push(comp[0]);
        }
    }
    let mut links = draft.aggregator_links.clone();
    links.extend(augmented.iter().copied());
    Ok(Topology::assemble(n, draft.edges, links, augmented))
}

/// One delivered message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub round: u32,
    pub message: ProtocolMessage,
    pub readable_by: BTreeSet<Principal>,
}

impl TraceEvent {
    pub fn readable(&self, who: Principal) -> bool {
        self.readable_by.contains(&who)
    }

    /// `step<TAB>sender<TAB>receiver<TAB>variant<TAB>keyid|PLAIN<TAB>payload`
    pub fn log_line(&self) -> String {
        let key = self
            .message
            .key
            .map_or_else(|| "PLAIN".to_string(), |k| k.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.message.sender,
            self.message.receiver,
            self.message.payload.variant(),
            key,
            self.message.payload.summary()
        )
    }
}

/// Message delivery with possession-based readability.
#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    mode: RelayMode,
    holders: BTreeMap<KeyId, BTreeSet<Principal>>,
    /// Every key that ever existed, kept after the round ends so transcripts
    /// can be audited.
    history: BTreeMap<KeyId, BTreeSet<Principal>>,
    events: Vec<TraceEvent>,
    round: u32,
}

impl Network {
    pub fn new(topology: Topology, mode: RelayMode) -> Self {
        Network {
            topology,
            mode,
            holders: BTreeMap::new(),
            history: BTreeMap::new(),
            events: Vec::new(),
            round: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mode(&self) -> RelayMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: RelayMode) {
        self.mode = mode;
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn key_holders(&self, key: &KeyId) -> Option<&BTreeSet<Principal>> {
        self.history.get(key)
    }

    fn principals(&self) -> BTreeSet<Principal> {
        std::iter::once(Principal::Server)
            .chain(self.topology.sources().map(Principal::Source))
            .collect()
    }

    /// Tags subsequent events with `round`.
    pub fn begin_round(&mut self, round: u32) {
        self.round = round;
    }

    pub fn register_key(&mut self, key: KeyId, holders: [Principal; 2]) {
        let set: BTreeSet<_> = holders.into_iter().collect();
        self.history.insert(key, set.clone());
        self.holders.insert(key, set);
    }

    /// Forgets live session keys; later deliveries under them fail.
    pub fn end_round(&mut self) {
        self.holders.clear();
    }

    fn linked(&self, a: Principal, b: Principal) -> Result<(), SimError> {
        let ok = match (a, b) {
            (Principal::Source(x), Principal::Source(y)) => {
                if self.mode == RelayMode::StrictRelay {
                    return Err(SimError::RelayViolation(a, b));
                }
                self.topology.has_edge(x, y)
            }
            // Source-server traffic may be routed over other sources; the
            // intermediate hops only see ciphertext.
            (Principal::Source(x), Principal::Server)
            | (Principal::Server, Principal::Source(x)) => self.topology.reaches_aggregator(x),
            (Principal::Server, Principal::Server) => false,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::NoLink(a, b))
        }
    }

    pub fn deliver(&mut self, message: ProtocolMessage) -> Result<&TraceEvent, SimError> {
        self.linked(message.sender, message.receiver)?;
        let readable_by = match message.key {
            None => self.principals(),
            Some(key) => {
                let holders = self.holders.get(&key).ok_or(SimError::UnknownKey(key))?;
                for who in [message.sender, message.receiver] {
                    if !holders.contains(&who) {
                        return Err(SimError::KeyNotHeld { holder: who, key });
                    }
                }
                holders.clone()
            }
        };
        let step = self.events.len() as u64;
        self.events.push(TraceEvent {
            step,
            round: self.round,
            message,
            readable_by,
        });
        Ok(self.events.last().unwrap())
    }
}

/// Everything recorded during a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub seed: u64,
    pub modulus: Modulus,
    pub topology: Topology,
    pub events: Vec<TraceEvent>,
    pub rounds: Vec<RoundRecord>,
    pub key_holders: BTreeMap<KeyId, BTreeSet<Principal>>,
    /// Ground truth for scoring attacks. Not part of the exported log and
    /// never consulted by the attacks themselves.
    pub inputs: BTreeMap<NodeId, u64>,
}

impl Transcript {
    pub fn round(&self, index: usize) -> Option<(&RoundRecord, &[TraceEvent])> {
        let rec = self.rounds.get(index)?;
        Some((rec, &self.events[rec.events.clone()]))
    }

    pub fn final_outcome(&self) -> Option<&RoundOutcome> {
        self.rounds.last().map(|r| &r.outcome)
    }

    /// Line-oriented log: one tab-separated line per event, `#` lines for
    /// the seed and each round's result.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# seed={} modulus={}", self.seed, self.modulus).unwrap();
        for rec in &self.rounds {
            for ev in &self.events[rec.events.clone()] {
                out.push_str(&ev.log_line());
                out.push('\n');
            }
            let initiator = rec
                .initiator
                .map_or_else(|| "-".to_string(), |i| i.to_string());
            let order: Vec<String> = rec.visitation.iter().map(|n| n.to_string()).collect();
            writeln!(
                out,
                "# round={} mode={} initiator={} order={} outcome={}",
                rec.round,
                rec.mode,
                initiator,
                order.join(","),
                rec.outcome
            )
            .unwrap();
        }
        out
    }
}

/// Provisions keys, builds the topology, and runs the configured rounds.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Transcript, ConfigError> {
    run_scenario_with(config, RoundOptions::from(config))
}

/// Like [`run_scenario`] with explicit per-round options.
pub fn run_scenario_with(
    config: &ScenarioConfig,
    options: RoundOptions,
) -> Result<Transcript, ConfigError> {
    config.validate()?;
    let modulus = Modulus::new(config.modulus).map_err(|e| ConfigError::field("modulus", e))?;
    let topology = build_topology(config)?;
    let inputs = config.resolve_values();

    let keybank = KeyBankConfig::new(config.total_keys, config.source_keys)
        .map_err(|e| ConfigError::field("source_keys", e))?;
    let mut keys = KeyDeployment::new(keybank, config.seed);
    let mut values = BTreeMap::new();
    for (i, &x) in inputs.iter().enumerate() {
        let id = NodeId(i as u32 + 1);
        keys.provision_source(id)
            .map_err(|e| ConfigError::field("total_keys", e))?;
        values.insert(
            id,
            PrivateValue::new(x, modulus).map_err(|e| ConfigError::field("values", e))?,
        );
    }

    let mut net = Network::new(topology.clone(), config.mode);
    let mut rounds = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        rounds.push(protocol::run_round(
            &mut net,
            &mut keys,
            &values,
            modulus,
            round,
            config.seed,
            options,
        ));
    }

    Ok(Transcript {
        seed: config.seed,
        modulus,
        key_holders: net.history.clone(),
        events: net.events,
        topology,
        rounds,
        inputs: values.into_iter().map(|(k, v)| (k, v.get())).collect(),
    })
}

fn build_topology(config: &ScenarioConfig) -> Result<Topology, ConfigError> {
    match config.topology_spec() {
        TopologySpec::Random(p) => generate_topology(
            config.n_sources,
            p,
            &mut rng::derive(config.seed, Stream::Topology, 0),
        )
        .map_err(|e| ConfigError::field("n_sources", e)),
        TopologySpec::Explicit {
            edges,
            aggregator_links,
        } => Topology::from_edges(
            config.n_sources,
            edges.iter().map(|e| (e[0], e[1])),
            aggregator_links.iter().copied(),
        )
        .map_err(|e| ConfigError::field("edges", e)),
    }
}
