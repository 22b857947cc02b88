//! The server-orchestrated ring secure-sum.
//!
//! A round runs as one sequential state machine:
//!
//! 1. every source opens an aggregator session by announcing a key index;
//! 2. the server picks a uniformly random initiator `c_1`;
//! 3. `c_1` masks its input with a fresh uniform `r_1` and reports its
//!    neighbourhood;
//! 4. the server picks the next hop among unvisited reported neighbours (or,
//!    when none is left, among all unvisited sources and relays the masked
//!    value itself); the chosen node adds its input and reports its own
//!    neighbourhood;
//! 5. once every source has contributed, the last node sends `R_N` to the
//!    server, which hands it to `c_1` for unmasking.
//!
//! `c_1` refuses to report a sum equal to its own input, which blocks a
//! server that tries to turn the initiator into its own terminator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keying::{KeyDeployment, KeyError, KeyId, KeyIndex, Permutation};
use crate::node::{NodeId, Principal};
use crate::rng::{self, Stream};
use crate::securesum::{
    self, AggregateSum, ArithError, InitialMask, MaskedValue, Modulus, PrivateValue,
};
use crate::simnet::{Network, SimError, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("topology has no sources")]
    NoSources,
    #[error(transparent)]
    Arith(#[from] ArithError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Net(#[from] SimError),
    #[error("no pairwise key between {0} and {1}")]
    MissingPairwiseKey(NodeId, NodeId),
    #[error("source {0} would contribute twice")]
    DoubleContribution(NodeId),
    #[error("{0} is not a source of this deployment")]
    UnknownNode(NodeId),
}

/// How masked values move between sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelayMode {
    /// Neighbours exchange masked values over pairwise keys.
    #[default]
    Direct,
    /// Every masked value goes up to the server and back down.
    StrictRelay,
}

impl fmt::Display for RelayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayMode::Direct => "direct",
            RelayMode::StrictRelay => "strict-relay",
        })
    }
}

/// Where the server tells the current holder of the masked value to send it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hop {
    Source(NodeId),
    ViaServer,
    /// Every source has contributed; send the final value to the server.
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    InitiateRound,
    KeyIndexAnnounce(KeyIndex),
    /// One endpoint's ordering of the source-source bank, relayed by the
    /// server during pairwise key setup.
    PermutationRelay {
        origin: NodeId,
        order: Permutation,
    },
    NeighborReport(Vec<NodeId>),
    NextHopDirective(Hop),
    MaskedForward(MaskedValue),
    RelayUp(MaskedValue),
    RelayDown(MaskedValue),
    FinalMaskedValue(MaskedValue),
    ComputeSumDirective(MaskedValue),
    SumReport(AggregateSum),
    OperationRefused,
}

impl Payload {
    pub fn variant(&self) -> &'static str {
        match self {
            Payload::InitiateRound => "InitiateRound",
            Payload::KeyIndexAnnounce(_) => "KeyIndexAnnounce",
            Payload::PermutationRelay { .. } => "PermutationRelay",
            Payload::NeighborReport(_) => "NeighborReport",
            Payload::NextHopDirective(_) => "NextHopDirective",
            Payload::MaskedForward(_) => "MaskedForward",
            Payload::RelayUp(_) => "RelayUp",
            Payload::RelayDown(_) => "RelayDown",
            Payload::FinalMaskedValue(_) => "FinalMaskedValue",
            Payload::ComputeSumDirective(_) => "ComputeSumDirective",
            Payload::SumReport(_) => "SumReport",
            Payload::OperationRefused => "OperationRefused",
        }
    }

    /// The masked value carried, if any.
    pub fn masked(&self) -> Option<MaskedValue> {
        match self {
            Payload::MaskedForward(v)
            | Payload::RelayUp(v)
            | Payload::RelayDown(v)
            | Payload::FinalMaskedValue(v)
            | Payload::ComputeSumDirective(v) => Some(*v),
            _ => None,
        }
    }

    /// One-field rendering used in the transcript log. Never contains a tab.
    pub fn summary(&self) -> String {
        fn ids(ids: &[NodeId]) -> String {
            ids.iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        match self {
            Payload::InitiateRound | Payload::OperationRefused => "-".to_string(),
            Payload::KeyIndexAnnounce(i) => format!("index={i}"),
            Payload::PermutationRelay { origin, order } => {
                format!("origin={origin},len={}", order.len())
            }
            Payload::NeighborReport(n) => format!("neighbors=[{}]", ids(n)),
            Payload::NextHopDirective(Hop::Source(id)) => format!("hop={id}"),
            Payload::NextHopDirective(Hop::ViaServer) => "hop=via-server".to_string(),
            Payload::NextHopDirective(Hop::Finish) => "hop=finish".to_string(),
            Payload::MaskedForward(v)
            | Payload::RelayUp(v)
            | Payload::RelayDown(v)
            | Payload::FinalMaskedValue(v)
            | Payload::ComputeSumDirective(v) => format!("R={v}"),
            Payload::SumReport(s) => format!("sum={s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub sender: Principal,
    pub receiver: Principal,
    /// `None` means plaintext.
    pub key: Option<KeyId>,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn plain(sender: Principal, receiver: Principal, payload: Payload) -> Self {
        ProtocolMessage {
            sender,
            receiver,
            key: None,
            payload,
        }
    }

    pub fn sealed(sender: Principal, receiver: Principal, key: KeyId, payload: Payload) -> Self {
        ProtocolMessage {
            sender,
            receiver,
            key: Some(key),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundOutcome {
    Sum(AggregateSum),
    /// The initiator answered "operation cannot be performed".
    Refused,
    Aborted(String),
}

impl fmt::Display for RoundOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundOutcome::Sum(s) => write!(f, "sum:{s}"),
            RoundOutcome::Refused => f.write_str("refused"),
            RoundOutcome::Aborted(why) => write!(f, "aborted:{}", why.replace(['\t', '\n'], " ")),
        }
    }
}

/// Summary of one round, kept alongside its events in the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub mode: RelayMode,
    pub initiator: Option<NodeId>,
    /// Sources in the order they added their input.
    pub visitation: Vec<NodeId>,
    pub contributions: BTreeMap<NodeId, u32>,
    pub outcome: RoundOutcome,
    /// Index range into the transcript's event list.
    pub events: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ServerBehavior {
    #[default]
    Honest,
    /// Right after initiation, claim the initiator's neighbourhood is
    /// exhausted and no source is left, then ask it for the "sum".
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOptions {
    pub mode: RelayMode,
    pub server: ServerBehavior,
    /// The initiator's equality check; disabling it is an ablation.
    pub defense: bool,
    pub forced_initiator: Option<NodeId>,
    /// Overrides the initiator's random draw; used by exhaustive checks.
    pub fixed_mask: Option<u64>,
}

impl Default for RoundOptions {
    fn default() -> Self {
        RoundOptions {
            mode: RelayMode::Direct,
            server: ServerBehavior::Honest,
            defense: true,
            forced_initiator: None,
            fixed_mask: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Initiator,
    AwaitingForward,
    Participated,
}

#[derive(Debug, Clone)]
pub struct SourceState {
    pub id: NodeId,
    pub phase: Phase,
    x: PrivateValue,
    mask: Option<InitialMask>,
}

impl SourceState {
    pub fn new(id: NodeId, x: PrivateValue) -> Self {
        SourceState {
            id,
            phase: Phase::Idle,
            x,
            mask: None,
        }
    }

    pub fn value(&self) -> PrivateValue {
        self.x
    }
}

#[derive(Debug, Clone, Default)]
pub struct AggregatorState {
    n_sources: usize,
    pub participated: BTreeSet<NodeId>,
    pub mode: RelayMode,
}

impl AggregatorState {
    pub fn new(n_sources: usize, mode: RelayMode) -> Self {
        AggregatorState {
            n_sources,
            participated: BTreeSet::new(),
            mode,
        }
    }

    pub fn all_participated(&self) -> bool {
        self.participated.len() == self.n_sources
    }
}

/// Server decision after a neighbourhood report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    Next(NodeId),
    NeighborhoodExhausted,
}

/// Uniformly random initiator.
pub fn start_round<R: Rng + ?Sized>(
    topology: &Topology,
    rng: &mut R,
) -> Result<NodeId, ProtocolError> {
    topology
        .sources()
        .choose(rng)
        .ok_or(ProtocolError::NoSources)
}

/// Draws `r_1` uniformly from `[0, M)` (unless fixed) and masks the
/// initiator's input. Returns `R_1` and the neighbour report.
pub fn initiator_begin<R: Rng + ?Sized>(
    node: &mut SourceState,
    topology: &Topology,
    m: Modulus,
    fixed_mask: Option<u64>,
    rng: &mut R,
) -> Result<(MaskedValue, Vec<NodeId>), ProtocolError> {
    let r = match fixed_mask {
        Some(r) => r,
        None => rng.gen_range(0..m.get()),
    };
    let mask = InitialMask::new(r, m)?;
    let masked = securesum::mask_initial(node.x.get(), mask.get(), m)?;
    node.mask = Some(mask);
    node.phase = Phase::Initiator;
    Ok((masked, topology.neighbors(node.id).to_vec()))
}

/// Uniform choice among reported neighbours that have not contributed yet.
pub fn server_select_next<R: Rng + ?Sized>(
    aggregator: &AggregatorState,
    reported: &[NodeId],
    rng: &mut R,
) -> NextHop {
    reported
        .iter()
        .copied()
        .filter(|n| !aggregator.participated.contains(n))
        .choose(rng)
        .map_or(NextHop::NeighborhoodExhausted, NextHop::Next)
}

/// Uniform choice among every source that has not contributed yet.
pub fn server_relay_jump<R: Rng + ?Sized>(
    aggregator: &AggregatorState,
    topology: &Topology,
    rng: &mut R,
) -> Option<NodeId> {
    topology
        .sources()
        .filter(|n| !aggregator.participated.contains(n))
        .choose(rng)
}

/// A source receiving the running value adds its own input.
pub fn receive_masked(
    node: &mut SourceState,
    incoming: MaskedValue,
    m: Modulus,
) -> Result<MaskedValue, ProtocolError> {
    if matches!(node.phase, Phase::Participated | Phase::Initiator) {
        return Err(ProtocolError::DoubleContribution(node.id));
    }
    let out = securesum::chain_add(incoming.get(), node.x.get(), m)?;
    node.phase = Phase::Participated;
    Ok(out)
}

/// The initiator's last step: unmask, then refuse if the result equals its
/// own input.
pub fn initiator_finish(
    node: &SourceState,
    last: MaskedValue,
    m: Modulus,
    defense: bool,
) -> Result<Payload, ProtocolError> {
    let mask = node.mask.ok_or(ProtocolError::UnknownNode(node.id))?;
    let sum = securesum::unmask(last.get(), mask.get(), m)?;
    if defense && sum.get() == node.x.get() {
        Ok(Payload::OperationRefused)
    } else {
        Ok(Payload::SumReport(sum))
    }
}

/// Runs one complete round over `net`. Errors inside the round become an
/// `Aborted` outcome; the record is always returned.
pub fn run_round(
    net: &mut Network,
    keys: &mut KeyDeployment,
    values: &BTreeMap<NodeId, PrivateValue>,
    m: Modulus,
    round: u32,
    seed: u64,
    options: RoundOptions,
) -> RoundRecord {
    let start = net.events().len();
    net.begin_round(round);
    let mut engine = RoundEngine {
        net,
        keys,
        m,
        round,
        options,
        nodes: values
            .iter()
            .map(|(&id, &x)| (id, SourceState::new(id, x)))
            .collect(),
        aggregator: AggregatorState::new(values.len(), options.mode),
        visitation: Vec::new(),
        contributions: BTreeMap::new(),
        initiator: None,
        routing: rng::derive(seed, Stream::Routing, round as u64),
        key_rng: rng::derive(seed, Stream::SessionKeys, round as u64),
        mask_rng: rng::derive(seed, Stream::Masks, round as u64),
    };
    let outcome = engine
        .execute()
        .unwrap_or_else(|e| RoundOutcome::Aborted(e.to_string()));
    let RoundEngine {
        net,
        keys,
        visitation,
        contributions,
        initiator,
        ..
    } = engine;
    keys.end_round();
    net.end_round();
    RoundRecord {
        round,
        mode: options.mode,
        initiator,
        visitation,
        contributions,
        outcome,
        events: start..net.events().len(),
    }
}

struct RoundEngine<'a> {
    net: &'a mut Network,
    keys: &'a mut KeyDeployment,
    m: Modulus,
    round: u32,
    options: RoundOptions,
    nodes: BTreeMap<NodeId, SourceState>,
    aggregator: AggregatorState,
    visitation: Vec<NodeId>,
    contributions: BTreeMap<NodeId, u32>,
    initiator: Option<NodeId>,
    routing: rng::SimRng,
    key_rng: rng::SimRng,
    mask_rng: rng::SimRng,
}

impl RoundEngine<'_> {
    fn execute(&mut self) -> Result<RoundOutcome, ProtocolError> {
        self.open_aggregator_sessions()?;

        let c1 = match self.options.forced_initiator {
            Some(id) if self.nodes.contains_key(&id) => id,
            Some(id) => return Err(ProtocolError::UnknownNode(id)),
            None => start_round(self.net.topology(), &mut self.routing)?,
        };
        self.initiator = Some(c1);
        self.send_down(c1, Payload::InitiateRound)?;

        let node = self.nodes.get_mut(&c1).expect("initiator is a source");
        let (mut held, neighbors) = initiator_begin(
            node,
            self.net.topology(),
            self.m,
            self.options.fixed_mask,
            &mut self.mask_rng,
        )?;
        self.contributed(c1)?;
        self.send_up(c1, Payload::NeighborReport(neighbors.clone()))?;

        let mut current = c1;
        let mut reported = neighbors;
        let probing = self.options.server == ServerBehavior::Probe;
        while !probing && !self.aggregator.all_participated() {
            let next = match server_select_next(&self.aggregator, &reported, &mut self.routing) {
                NextHop::Next(j) => {
                    self.aggregator.participated.insert(j);
                    match self.options.mode {
                        RelayMode::Direct => self.forward_direct(current, j, held)?,
                        RelayMode::StrictRelay => self.forward_via_server(current, j, held)?,
                    }
                    j
                }
                NextHop::NeighborhoodExhausted => {
                    let j =
                        server_relay_jump(&self.aggregator, self.net.topology(), &mut self.routing)
                            .expect("loop guard: some source has not participated");
                    self.aggregator.participated.insert(j);
                    self.forward_via_server(current, j, held)?;
                    j
                }
            };
            let node = self
                .nodes
                .get_mut(&next)
                .ok_or(ProtocolError::UnknownNode(next))?;
            held = receive_masked(node, held, self.m)?;
            self.contributed(next)?;
            reported = self.net.topology().neighbors(next).to_vec();
            self.send_up(next, Payload::NeighborReport(reported.clone()))?;
            current = next;
        }

        self.finalize(current, c1, held)
    }

    fn open_aggregator_sessions(&mut self) -> Result<(), ProtocolError> {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for s in ids {
            let (index, key) = self
                .keys
                .select_aggregator_key(s, self.round, &mut self.key_rng)?;
            self.net
                .register_key(key.id, [Principal::Server, Principal::Source(s)]);
            self.net.deliver(ProtocolMessage::plain(
                s.into(),
                Principal::Server,
                Payload::KeyIndexAnnounce(index),
            ))?;
            let at_server = self.keys.accept_aggregator_key(s, index, self.round)?;
            debug_assert_eq!(at_server, key);
        }
        Ok(())
    }

    fn contributed(&mut self, id: NodeId) -> Result<(), ProtocolError> {
        let count = self.contributions.entry(id).or_insert(0);
        *count += 1;
        if *count > 1 {
            return Err(ProtocolError::DoubleContribution(id));
        }
        self.aggregator.participated.insert(id);
        self.visitation.push(id);
        Ok(())
    }

    fn agg_key(&self, s: NodeId) -> Result<KeyId, ProtocolError> {
        self.keys
            .directory()
            .session(s)
            .map(|k| k.id)
            .ok_or(ProtocolError::Key(KeyError::MissingAggregatorSession(s)))
    }

    fn send_down(&mut self, s: NodeId, payload: Payload) -> Result<(), ProtocolError> {
        let key = self.agg_key(s)?;
        self.net.deliver(ProtocolMessage::sealed(
            Principal::Server,
            s.into(),
            key,
            payload,
        ))?;
        Ok(())
    }

    fn send_up(&mut self, s: NodeId, payload: Payload) -> Result<(), ProtocolError> {
        let key = self.agg_key(s)?;
        self.net.deliver(ProtocolMessage::sealed(
            s.into(),
            Principal::Server,
            key,
            payload,
        ))?;
        Ok(())
    }

    fn forward_direct(
        &mut self,
        from: NodeId,
        to: NodeId,
        value: MaskedValue,
    ) -> Result<(), ProtocolError> {
        self.send_down(from, Payload::NextHopDirective(Hop::Source(to)))?;

        let ex = self
            .keys
            .establish_pairwise_key(from, to, self.round, &mut self.key_rng)?;
        self.net.register_key(ex.key.id, [from.into(), to.into()]);
        let up_a = Payload::PermutationRelay {
            origin: from,
            order: ex.initiator_perm.clone(),
        };
        let up_b = Payload::PermutationRelay {
            origin: to,
            order: ex.responder_perm.clone(),
        };
        self.send_up(from, up_a.clone())?;
        self.send_down(to, up_a)?;
        self.send_up(to, up_b.clone())?;
        self.send_down(from, up_b)?;
        self.net.deliver(ProtocolMessage::plain(
            from.into(),
            to.into(),
            Payload::KeyIndexAnnounce(ex.index),
        ))?;

        let key = self
            .keys
            .keyring(from)
            .and_then(|r| r.pairwise_with(to))
            .ok_or(ProtocolError::MissingPairwiseKey(from, to))?
            .id;
        self.net.deliver(ProtocolMessage::sealed(
            from.into(),
            to.into(),
            key,
            Payload::MaskedForward(value),
        ))?;
        Ok(())
    }

    fn forward_via_server(
        &mut self,
        from: NodeId,
        to: NodeId,
        value: MaskedValue,
    ) -> Result<(), ProtocolError> {
        self.send_down(from, Payload::NextHopDirective(Hop::ViaServer))?;
        self.send_up(from, Payload::RelayUp(value))?;
        self.send_down(to, Payload::RelayDown(value))?;
        if let Some(node) = self.nodes.get_mut(&to) {
            node.phase = Phase::AwaitingForward;
        }
        Ok(())
    }

    fn finalize(
        &mut self,
        last: NodeId,
        c1: NodeId,
        held: MaskedValue,
    ) -> Result<RoundOutcome, ProtocolError> {
        self.send_down(last, Payload::NextHopDirective(Hop::Finish))?;
        self.send_up(last, Payload::FinalMaskedValue(held))?;
        self.send_down(c1, Payload::ComputeSumDirective(held))?;
        let reply = initiator_finish(&self.nodes[&c1], held, self.m, self.options.defense)?;
        let outcome = match &reply {
            Payload::SumReport(s) => RoundOutcome::Sum(*s),
            _ => RoundOutcome::Refused,
        };
        self.send_up(c1, reply)?;
        Ok(outcome)
    }
}

/// Forwards `value` from `from` to `to` over their pairwise key.
///
/// Exposed for callers that drive the network by hand; the round engine
/// goes through the same delivery path.
pub fn forward_masked(
    net: &mut Network,
    keys: &KeyDeployment,
    from: NodeId,
    to: NodeId,
    value: MaskedValue,
) -> Result<(), ProtocolError> {
    let key = keys
        .keyring(from)
        .and_then(|r| r.pairwise_with(to))
        .ok_or(ProtocolError::MissingPairwiseKey(from, to))?
        .id;
    net.deliver(ProtocolMessage::sealed(
        from.into(),
        to.into(),
        key,
        Payload::MaskedForward(value),
    ))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::KeyBankConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(v: u64) -> Modulus {
        Modulus::new(v).unwrap()
    }

    struct Fixture {
        net: Network,
        keys: KeyDeployment,
        values: BTreeMap<NodeId, PrivateValue>,
        modulus: Modulus,
    }

    fn fixture(topology: Topology, xs: &[u64], modulus: u64, seed: u64) -> Fixture {
        let modulus = m(modulus);
        let mut keys = KeyDeployment::new(KeyBankConfig::new(20, 6).unwrap(), seed);
        let mut values = BTreeMap::new();
        for (i, &x) in xs.iter().enumerate() {
            let id = NodeId(i as u32 + 1);
            keys.provision_source(id).unwrap();
            values.insert(id, PrivateValue::new(x, modulus).unwrap());
        }
        Fixture {
            net: Network::new(topology, RelayMode::Direct),
            keys,
            values,
            modulus,
        }
    }

    fn run(f: &mut Fixture, seed: u64, options: RoundOptions) -> RoundRecord {
        f.net.set_mode(options.mode);
        run_round(
            &mut f.net,
            &mut f.keys,
            &f.values,
            f.modulus,
            0,
            seed,
            options,
        )
    }

    fn complete(n: u32) -> Topology {
        let edges = (1..=n).flat_map(|a| (a + 1..=n).map(move |b| (a, b)));
        Topology::from_edges(n, edges, 1..=n).unwrap()
    }

    #[test]
    fn single_source_initiator_is_forced() {
        let topo = complete(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(start_round(&topo, &mut rng).unwrap(), NodeId(1));
    }

    #[test]
    fn initiator_begin_masks_and_reports_neighbors() {
        let topo = Topology::from_edges(3, [(1, 2), (1, 3)], [1]).unwrap();
        let mut node = SourceState::new(NodeId(1), PrivateValue::new(3, m(32)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r1, neighbors) = initiator_begin(&mut node, &topo, m(32), Some(11), &mut rng).unwrap();
        assert_eq!(r1.get(), 14);
        assert_eq!(neighbors, vec![NodeId(2), NodeId(3)]);
        assert_eq!(node.phase, Phase::Initiator);
    }

    #[test]
    fn select_next_skips_participated() {
        let mut agg = AggregatorState::new(3, RelayMode::Direct);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reported = [NodeId(2), NodeId(3)];
        let mut seen = [0u32; 2];
        for _ in 0..2000 {
            match server_select_next(&agg, &reported, &mut rng) {
                NextHop::Next(n) => seen[n.0 as usize - 2] += 1,
                NextHop::NeighborhoodExhausted => panic!("candidates left"),
            }
        }
        // Binomial(2000, 0.5): sd ~ 22, allow 5 sd.
        assert!((seen[0] as i64 - 1000).abs() < 112, "{seen:?}");
        agg.participated.extend(reported);
        assert_eq!(
            server_select_next(&agg, &reported, &mut rng),
            NextHop::NeighborhoodExhausted
        );
        agg.participated.remove(&NodeId(3));
        assert_eq!(
            server_select_next(&agg, &reported, &mut rng),
            NextHop::Next(NodeId(3))
        );
    }

    #[test]
    fn chain_example_sums_to_26() {
        let mut f = fixture(
            Topology::from_edges(3, [(1, 2), (2, 3)], [3]).unwrap(),
            &[3, 9, 14],
            32,
            0,
        );
        let rec = run(
            &mut f,
            0,
            RoundOptions {
                forced_initiator: Some(NodeId(1)),
                fixed_mask: Some(11),
                ..Default::default()
            },
        );
        assert_eq!(rec.visitation, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(
            rec.outcome,
            RoundOutcome::Sum(AggregateSum::new(26, f.modulus).unwrap())
        );
        let forwards: Vec<u64> = f.net.events()[rec.events.clone()]
            .iter()
            .filter_map(|e| match e.message.payload {
                Payload::MaskedForward(v) => Some(v.get()),
                _ => None,
            })
            .collect();
        assert_eq!(forwards, vec![14, 23]);
        let last =
            f.net.events()[rec.events.clone()]
                .iter()
                .find_map(|e| match e.message.payload {
                    Payload::FinalMaskedValue(v) => Some(v.get()),
                    _ => None,
                });
        assert_eq!(last, Some(5));
    }

    #[test]
    fn strict_relay_has_no_source_to_source_traffic() {
        let mut f = fixture(
            Topology::from_edges(3, [(1, 2), (2, 3)], [3]).unwrap(),
            &[3, 9, 14],
            32,
            0,
        );
        let rec = run(
            &mut f,
            0,
            RoundOptions {
                mode: RelayMode::StrictRelay,
                forced_initiator: Some(NodeId(1)),
                fixed_mask: Some(11),
                ..Default::default()
            },
        );
        assert_eq!(
            rec.outcome,
            RoundOutcome::Sum(AggregateSum::new(26, f.modulus).unwrap())
        );
        for e in &f.net.events()[rec.events.clone()] {
            assert!(
                e.message.sender == Principal::Server || e.message.receiver == Principal::Server,
                "{:?}",
                e.message
            );
        }
        let final_value = f.net.events()[rec.events]
            .iter()
            .find_map(|e| match e.message.payload {
                Payload::FinalMaskedValue(v) => Some(v.get()),
                _ => None,
            });
        assert_eq!(final_value, Some(5));
    }

    #[test]
    fn forward_without_pairwise_key_fails() {
        let f = fixture(complete(2), &[1, 2], 32, 0);
        let mut net = f.net;
        let err = forward_masked(
            &mut net,
            &f.keys,
            NodeId(1),
            NodeId(2),
            MaskedValue::new(3, f.modulus).unwrap(),
        )
        .unwrap_err();
        assert_eq!(err, ProtocolError::MissingPairwiseKey(NodeId(1), NodeId(2)));
    }

    #[test]
    fn isolated_source_is_reached_by_relay() {
        // 1-2 linked, 3 only attached to the server.
        let topo = Topology::from_edges(3, [(1, 2)], [2, 3]).unwrap();
        let mut f = fixture(topo, &[4, 5, 6], 64, 0);
        for seed in 0..30 {
            let rec = run(&mut f, seed, RoundOptions::default());
            assert_eq!(
                rec.outcome,
                RoundOutcome::Sum(AggregateSum::new(15, f.modulus).unwrap())
            );
            assert!(rec.contributions.values().all(|&c| c == 1));
            let evs = &f.net.events()[rec.events.clone()];
            let downs: Vec<_> = evs
                .iter()
                .filter(|e| matches!(e.message.payload, Payload::RelayDown(_)))
                .collect();
            assert!(!downs.is_empty());
            for d in downs {
                assert!(d.message.key.is_some());
                let to = d.message.receiver.source().unwrap();
                assert!(rec.visitation.contains(&to));
            }
        }
    }

    #[test]
    fn single_source_round_is_refused() {
        let mut f = fixture(complete(1), &[5], 16, 0);
        let rec = run(&mut f, 3, RoundOptions::default());
        assert_eq!(rec.outcome, RoundOutcome::Refused);
    }

    #[test]
    fn zero_others_is_a_false_alarm() {
        let mut f = fixture(complete(3), &[7, 0, 0], 64, 0);
        let rec = run(
            &mut f,
            0,
            RoundOptions {
                forced_initiator: Some(NodeId(1)),
                ..Default::default()
            },
        );
        assert_eq!(rec.outcome, RoundOutcome::Refused);
        let refused = f.net.events()[rec.events]
            .iter()
            .any(|e| e.message.payload == Payload::OperationRefused);
        assert!(refused);
    }

    #[test]
    fn probe_is_refused_unless_ablated() {
        let mut f = fixture(complete(4), &[9, 1, 2, 3], 64, 0);
        let probe = RoundOptions {
            server: ServerBehavior::Probe,
            forced_initiator: Some(NodeId(1)),
            ..Default::default()
        };
        assert_eq!(run(&mut f, 0, probe).outcome, RoundOutcome::Refused);
        let ablated = RoundOptions {
            defense: false,
            ..probe
        };
        assert_eq!(
            run(&mut f, 0, ablated).outcome,
            RoundOutcome::Sum(AggregateSum::new(9, f.modulus).unwrap())
        );
    }

    #[test]
    fn mask_never_leaves_initiator() {
        let mut f = fixture(complete(4), &[1, 2, 3, 4], 1 << 40, 0);
        // Fix the mask to a value no other quantity in the round can equal.
        let r1 = (1u64 << 40) - 3;
        let rec = run(
            &mut f,
            0,
            RoundOptions {
                fixed_mask: Some(r1),
                ..Default::default()
            },
        );
        for e in &f.net.events()[rec.events] {
            assert!(!e.message.payload.summary().contains(&r1.to_string()));
        }
    }

    #[test]
    fn unknown_forced_initiator_aborts() {
        let mut f = fixture(complete(2), &[1, 2], 16, 0);
        let rec = run(
            &mut f,
            0,
            RoundOptions {
                forced_initiator: Some(NodeId(9)),
                ..Default::default()
            },
        );
        assert!(matches!(rec.outcome, RoundOutcome::Aborted(_)));
    }
}
