//! Attacks evaluated against recorded transcripts.
//!
//! Every attack here works only from what its principals could read: a
//! message counts as observed when one of the attackers is in its reader
//! set. Ground-truth inputs stored in the transcript are used for scoring by
//! callers, never by the attacks.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::config::{AdversaryKind, ConfigError, ScenarioConfig};
use crate::node::{NodeId, Principal};
use crate::protocol::{Payload, RoundOptions, RoundOutcome, ServerBehavior};
use crate::securesum::{self, MaskedValue, Modulus};
use crate::simnet::{self, TraceEvent, Transcript};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("round {0} is not in the transcript")]
    NoSuchRound(usize),
    #[error("{0} did not take part in the round")]
    NotParticipant(NodeId),
    #[error("{0} lacks a predecessor or successor in the visitation order")]
    NotApplicable(NodeId),
    #[error("link-break probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryModel {
    /// A coalition of sources that pool everything they can read.
    SemiHonestNodes(BTreeSet<NodeId>),
    /// The two ring neighbours of the target collude.
    NeighborCollusion(NodeId),
    /// The server short-circuits the ring at the initiator.
    MaliciousServerProbe { defense: bool },
    /// Each link used in the round is broken with probability `b`.
    LinkCompromise(f64),
}

impl AdversaryModel {
    /// The model a scenario config asks for, if any.
    pub fn from_config(config: &ScenarioConfig) -> Option<Self> {
        Some(match config.adversary {
            AdversaryKind::None => return None,
            AdversaryKind::SemiHonest => AdversaryModel::SemiHonestNodes(
                config.adversary_nodes.iter().map(|&n| NodeId(n)).collect(),
            ),
            AdversaryKind::Collusion => {
                AdversaryModel::NeighborCollusion(NodeId(config.adversary_target?))
            }
            AdversaryKind::ServerProbe => AdversaryModel::MaliciousServerProbe {
                defense: config.probe_defense,
            },
            AdversaryKind::LinkCompromise => AdversaryModel::LinkCompromise(config.link_break_prob),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttackOutcome {
    /// Recovered private values; every entry is below the modulus.
    pub disclosed: BTreeMap<NodeId, u64>,
    pub success: bool,
    pub defense_triggered: bool,
}

impl AttackOutcome {
    fn from_disclosed(disclosed: BTreeMap<NodeId, u64>) -> Self {
        AttackOutcome {
            success: !disclosed.is_empty(),
            disclosed,
            defense_triggered: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservedKind {
    Masked,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub step: u64,
    pub sender: Principal,
    pub receiver: Principal,
    pub kind: ObservedKind,
    pub value: u64,
}

fn round_events(transcript: &Transcript, round: usize) -> Result<&[TraceEvent], AttackError> {
    transcript
        .round(round)
        .map(|(_, evs)| evs)
        .ok_or(AttackError::NoSuchRound(round))
}

/// Every value-carrying payload the given sources can read in `round`.
///
/// A lone non-initiator sees the masked value it receives and the one it
/// sends. The initiator additionally sees `R_N` and the sum it reports,
/// from which it can compute the total of everyone else's inputs.
pub fn semi_honest_view(
    transcript: &Transcript,
    round: usize,
    nodes: &BTreeSet<NodeId>,
) -> Result<Vec<Observation>, AttackError> {
    let events = round_events(transcript, round)?;
    let readers: BTreeSet<Principal> = nodes.iter().map(|&n| Principal::Source(n)).collect();
    Ok(events
        .iter()
        .filter(|e| !e.readable_by.is_disjoint(&readers))
        .filter_map(|e| {
            let (kind, value) = match &e.message.payload {
                Payload::SumReport(s) => (ObservedKind::Sum, s.get()),
                p => (ObservedKind::Masked, p.masked()?.get()),
            };
            Some(Observation {
                step: e.step,
                sender: e.message.sender,
                receiver: e.message.receiver,
                kind,
                value,
            })
        })
        .collect())
}

/// The masked value a source received during the ring pass, and the one it
/// passed on, as far as the given readers can see them.
fn ring_values(
    events: &[TraceEvent],
    target: NodeId,
    readers: &BTreeSet<Principal>,
) -> (Option<MaskedValue>, Option<MaskedValue>) {
    let t = Principal::Source(target);
    let visible = |e: &&TraceEvent| !e.readable_by.is_disjoint(readers);
    let incoming = events
        .iter()
        .filter(visible)
        .find_map(|e| match e.message.payload {
            Payload::MaskedForward(v) | Payload::RelayDown(v) if e.message.receiver == t => Some(v),
            _ => None,
        });
    let outgoing = events
        .iter()
        .filter(visible)
        .find_map(|e| match e.message.payload {
            Payload::MaskedForward(v) | Payload::RelayUp(v) | Payload::FinalMaskedValue(v)
                if e.message.sender == t =>
            {
                Some(v)
            }
            _ => None,
        });
    (incoming, outgoing)
}

/// Pools the views of `coalition` and recovers the input of every other
/// source whose incoming and outgoing masked values the coalition can read.
pub fn run_coalition_attack(
    transcript: &Transcript,
    round: usize,
    coalition: &BTreeSet<NodeId>,
) -> Result<AttackOutcome, AttackError> {
    let (record, events) = transcript
        .round(round)
        .ok_or(AttackError::NoSuchRound(round))?;
    let readers: BTreeSet<Principal> = coalition.iter().map(|&n| Principal::Source(n)).collect();
    let mut disclosed = BTreeMap::new();
    for &target in record.visitation.iter().skip(1) {
        if coalition.contains(&target) {
            continue;
        }
        if let (Some(inc), Some(out)) = ring_values(events, target, &readers) {
            let x = securesum::collusion_recover(out.get(), inc.get(), transcript.modulus)
                .expect("transcript values are reduced");
            disclosed.insert(target, x.get());
        }
    }
    Ok(AttackOutcome::from_disclosed(disclosed))
}

/// The target's predecessor and successor in visitation order collude and
/// subtract the masked values they saw enter and leave the target.
pub fn run_collusion_attack(
    transcript: &Transcript,
    round: usize,
    target: NodeId,
) -> Result<AttackOutcome, AttackError> {
    let (record, events) = transcript
        .round(round)
        .ok_or(AttackError::NoSuchRound(round))?;
    let pos = record
        .visitation
        .iter()
        .position(|&n| n == target)
        .ok_or(AttackError::NotParticipant(target))?;
    if pos == 0 || pos + 1 >= record.visitation.len() {
        return Err(AttackError::NotApplicable(target));
    }
    let colluders: BTreeSet<Principal> = [record.visitation[pos - 1], record.visitation[pos + 1]]
        .into_iter()
        .map(Principal::Source)
        .collect();
    let mut disclosed = BTreeMap::new();
    if let (Some(inc), Some(out)) = ring_values(events, target, &colluders) {
        let x = securesum::collusion_recover(out.get(), inc.get(), transcript.modulus)
            .expect("transcript values are reduced");
        disclosed.insert(target, x.get());
    }
    Ok(AttackOutcome::from_disclosed(disclosed))
}

/// Sources that have both a predecessor and a successor in `round`.
pub fn interior_targets(transcript: &Transcript, round: usize) -> Vec<NodeId> {
    transcript.round(round).map_or_else(Vec::new, |(rec, _)| {
        let v = &rec.visitation;
        if v.len() < 3 {
            Vec::new()
        } else {
            v[1..v.len() - 1].to_vec()
        }
    })
}

/// Interior sources whose incoming and outgoing masked values both went
/// over a direct forward rather than a relay through the server.
pub fn collusion_targets(transcript: &Transcript, round: usize) -> Vec<NodeId> {
    let Some((_, events)) = transcript.round(round) else {
        return Vec::new();
    };
    let direct = |from: Principal, to: Principal| {
        events.iter().any(|e| {
            matches!(e.message.payload, Payload::MaskedForward(_))
                && e.message.sender == from
                && e.message.receiver == to
        })
    };
    let (rec, _) = transcript.round(round).expect("checked above");
    let v = &rec.visitation;
    (1..v.len().saturating_sub(1))
        .filter(|&i| {
            let [p, t, n] = [v[i - 1], v[i], v[i + 1]].map(Principal::Source);
            direct(p, t) && direct(t, n)
        })
        .map(|i| v[i])
        .collect()
}

/// Runs the scenario with a server that declares the initiator's
/// neighbourhood exhausted straight away and asks it for the sum. With the
/// defense on the initiator refuses; without it the reported "sum" is its
/// own input.
pub fn run_server_probe(
    config: &ScenarioConfig,
    initiator: Option<NodeId>,
    defense: bool,
) -> Result<AttackOutcome, AttackError> {
    let options = RoundOptions {
        server: ServerBehavior::Probe,
        defense,
        forced_initiator: initiator,
        ..RoundOptions::from(config)
    };
    let transcript = simnet::run_scenario_with(config, options)?;
    let mut outcome = AttackOutcome::default();
    for rec in &transcript.rounds {
        match (&rec.outcome, rec.initiator) {
            (RoundOutcome::Sum(s), Some(c1)) => {
                outcome.disclosed.insert(c1, s.get());
            }
            (RoundOutcome::Refused, _) => outcome.defense_triggered = true,
            _ => {}
        }
    }
    outcome.success = !outcome.disclosed.is_empty();
    Ok(outcome)
}

/// How one masked value travelled: the links it crossed, from the source
/// that produced it to the one that consumed it.
#[derive(Debug, Clone)]
struct Transfer {
    from: NodeId,
    to: Option<NodeId>,
    value: MaskedValue,
    links: Vec<usize>,
}

/// Link-level view of one round, prepared once and reused across trials.
#[derive(Debug, Clone)]
pub struct LinkExposure {
    modulus: Modulus,
    links: Vec<(Principal, Principal)>,
    /// Per candidate: (target, transfer in, transfer out).
    candidates: Vec<(NodeId, Transfer, Transfer)>,
}

impl LinkExposure {
    pub fn new(transcript: &Transcript, round: usize) -> Result<Self, AttackError> {
        let (record, events) = transcript
            .round(round)
            .ok_or(AttackError::NoSuchRound(round))?;
        let mut links: Vec<(Principal, Principal)> = Vec::new();
        let mut link_id = |a: Principal, b: Principal| {
            let key = (a.min(b), a.max(b));
            match links.iter().position(|&l| l == key) {
                Some(i) => i,
                None => {
                    links.push(key);
                    links.len() - 1
                }
            }
        };

        let mut transfers: Vec<Transfer> = Vec::new();
        let mut pending: Option<Transfer> = None;
        for e in events {
            let (s, r) = (e.message.sender, e.message.receiver);
            match e.message.payload {
                Payload::MaskedForward(v) => transfers.push(Transfer {
                    from: s.source().expect("forward from a source"),
                    to: r.source(),
                    value: v,
                    links: vec![link_id(s, r)],
                }),
                Payload::RelayUp(v) | Payload::FinalMaskedValue(v) => {
                    pending = Some(Transfer {
                        from: s.source().expect("relay from a source"),
                        to: None,
                        value: v,
                        links: vec![link_id(s, r)],
                    })
                }
                Payload::RelayDown(v) | Payload::ComputeSumDirective(v) => {
                    let mut t = pending.take().expect("downward leg follows an upward leg");
                    debug_assert_eq!(t.value, v);
                    t.links.push(link_id(s, r));
                    if matches!(e.message.payload, Payload::RelayDown(_)) {
                        t.to = r.source();
                    }
                    transfers.push(t);
                }
                _ => {}
            }
        }
        if let Some(t) = pending {
            transfers.push(t);
        }

        let mut candidates = Vec::new();
        for &target in record.visitation.iter().skip(1) {
            let inc = transfers.iter().find(|t| t.to == Some(target));
            let out = transfers.iter().find(|t| t.from == target);
            if let (Some(i), Some(o)) = (inc, out) {
                candidates.push((target, i.clone(), o.clone()));
            }
        }
        Ok(LinkExposure {
            modulus: transcript.modulus,
            links,
            candidates,
        })
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Sources whose input is exposed when every link is broken.
    pub fn candidates(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.candidates.iter().map(|c| c.0)
    }

    /// One draw: break each link with probability `b`, then recover every
    /// source whose incoming and outgoing masked values both crossed a
    /// broken link.
    pub fn trial<R: Rng + ?Sized>(&self, b: f64, rng: &mut R) -> AttackOutcome {
        let broken: Vec<bool> = (0..self.links.len()).map(|_| rng.gen_bool(b)).collect();
        let seen = |t: &Transfer| t.links.iter().any(|&l| broken[l]);
        let mut disclosed = BTreeMap::new();
        for (target, inc, out) in &self.candidates {
            if seen(inc) && seen(out) {
                let x =
                    securesum::collusion_recover(out.value.get(), inc.value.get(), self.modulus)
                        .expect("transcript values are reduced");
                disclosed.insert(*target, x.get());
            }
        }
        AttackOutcome::from_disclosed(disclosed)
    }
}

pub fn run_link_compromise<R: Rng + ?Sized>(
    transcript: &Transcript,
    round: usize,
    b: f64,
    rng: &mut R,
) -> Result<AttackOutcome, AttackError> {
    if !(0.0..=1.0).contains(&b) {
        return Err(AttackError::InvalidProbability(b));
    }
    Ok(LinkExposure::new(transcript, round)?.trial(b, rng))
}

/// Fraction of `trials` link-compromise draws in which `node` is disclosed.
pub fn empirical_disclosure<R: Rng + ?Sized>(
    exposure: &LinkExposure,
    node: NodeId,
    b: f64,
    trials: u64,
    rng: &mut R,
) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let hits = (0..trials)
        .filter(|_| exposure.trial(b, rng).disclosed.contains_key(&node))
        .count();
    hits as f64 / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::RelayMode;
    use crate::simnet::run_scenario_with;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_config(mode: RelayMode) -> ScenarioConfig {
        let mut c = ScenarioConfig::with_values(vec![3, 9, 14], 32, 7);
        c.edges = Some(vec![[1, 2], [2, 3]]);
        c.aggregator_links = Some(vec![3]);
        c.mode = mode;
        c
    }

    fn chain(mode: RelayMode) -> Transcript {
        let c = chain_config(mode);
        let options = RoundOptions {
            forced_initiator: Some(NodeId(1)),
            fixed_mask: Some(11),
            ..RoundOptions::from(&c)
        };
        run_scenario_with(&c, options).unwrap()
    }

    #[test]
    fn middle_node_sees_two_masked_values() {
        let t = chain(RelayMode::Direct);
        let view = semi_honest_view(&t, 0, &BTreeSet::from([NodeId(2)])).unwrap();
        let values: Vec<u64> = view.iter().map(|o| o.value).collect();
        assert_eq!(values, vec![14, 23]);
        assert!(view.iter().all(|o| o.kind == ObservedKind::Masked));
    }

    #[test]
    fn initiator_sees_the_sum() {
        let t = chain(RelayMode::Direct);
        let view = semi_honest_view(&t, 0, &BTreeSet::from([NodeId(1)])).unwrap();
        let sum = view.iter().find(|o| o.kind == ObservedKind::Sum).unwrap();
        assert_eq!(sum.value, 26);
        // ... and hence the total of the others.
        assert_eq!(sum.value - t.inputs[&NodeId(1)], 9 + 14);
    }

    #[test]
    fn neighbors_recover_middle_input() {
        let t = chain(RelayMode::Direct);
        let out = run_collusion_attack(&t, 0, NodeId(2)).unwrap();
        assert!(out.success);
        assert_eq!(out.disclosed[&NodeId(2)], 9);
    }

    #[test]
    fn strict_relay_blocks_collusion() {
        let t = chain(RelayMode::StrictRelay);
        assert_eq!(
            t.final_outcome(),
            Some(&RoundOutcome::Sum(
                securesum::AggregateSum::new(26, t.modulus).unwrap()
            ))
        );
        let out = run_collusion_attack(&t, 0, NodeId(2)).unwrap();
        assert!(!out.success);
        assert!(out.disclosed.is_empty());
    }

    #[test]
    fn boundary_targets_are_not_applicable() {
        let t = chain(RelayMode::Direct);
        assert_eq!(
            run_collusion_attack(&t, 0, NodeId(1)),
            Err(AttackError::NotApplicable(NodeId(1)))
        );
        assert_eq!(
            run_collusion_attack(&t, 0, NodeId(3)),
            Err(AttackError::NotApplicable(NodeId(3)))
        );
        assert_eq!(
            run_collusion_attack(&t, 0, NodeId(7)),
            Err(AttackError::NotParticipant(NodeId(7)))
        );
        assert_eq!(
            run_collusion_attack(&t, 3, NodeId(2)),
            Err(AttackError::NoSuchRound(3))
        );
        assert_eq!(collusion_targets(&t, 0), vec![NodeId(2)]);
        assert_eq!(interior_targets(&t, 0), vec![NodeId(2)]);
    }

    #[test]
    fn relayed_targets_are_not_eligible() {
        let t = chain(RelayMode::StrictRelay);
        assert_eq!(interior_targets(&t, 0), vec![NodeId(2)]);
        assert!(collusion_targets(&t, 0).is_empty());
    }

    #[test]
    fn coalition_generalises_collusion() {
        let t = chain(RelayMode::Direct);
        let out = run_coalition_attack(&t, 0, &BTreeSet::from([NodeId(1), NodeId(3)])).unwrap();
        assert_eq!(out.disclosed, BTreeMap::from([(NodeId(2), 9)]));
        // A single node learns nobody's input.
        for n in 1..=3 {
            let alone = run_coalition_attack(&t, 0, &BTreeSet::from([NodeId(n)])).unwrap();
            assert!(alone.disclosed.is_empty(), "s{n}");
        }
    }

    #[test]
    fn probe_defense_and_ablation() {
        let c = ScenarioConfig::with_values(vec![4, 8, 15, 16], 64, 1);
        for s in 1..=4 {
            let guarded = run_server_probe(&c, Some(NodeId(s)), true).unwrap();
            assert!(guarded.defense_triggered);
            assert!(guarded.disclosed.is_empty());
            let open = run_server_probe(&c, Some(NodeId(s)), false).unwrap();
            assert_eq!(
                open.disclosed[&NodeId(s)],
                c.values.as_ref().unwrap()[s as usize - 1]
            );
        }
    }

    #[test]
    fn link_compromise_extremes() {
        let t = chain(RelayMode::Direct);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(run_link_compromise(&t, 0, 0.0, &mut rng)
                .unwrap()
                .disclosed
                .is_empty());
        }
        let all = run_link_compromise(&t, 0, 1.0, &mut rng).unwrap();
        // Everyone but the initiator.
        assert_eq!(
            all.disclosed,
            BTreeMap::from([(NodeId(2), 9), (NodeId(3), 14)])
        );
        assert_eq!(
            run_link_compromise(&t, 0, 1.5, &mut rng),
            Err(AttackError::InvalidProbability(1.5))
        );
    }

    #[test]
    fn middle_node_disclosure_rate_is_b_squared() {
        let t = chain(RelayMode::Direct);
        let exposure = LinkExposure::new(&t, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: f64 = 0.5;
        let trials = 20_000;
        let p = empirical_disclosure(&exposure, NodeId(2), b, trials, &mut rng);
        let sigma = (b * b * (1.0 - b * b) / trials as f64).sqrt();
        assert!((p - b * b).abs() < 3.0 * sigma, "p={p}");
    }

    #[test]
    fn model_from_config() {
        let mut c = chain_config(RelayMode::Direct);
        assert_eq!(AdversaryModel::from_config(&c), None);
        c.adversary = AdversaryKind::LinkCompromise;
        c.link_break_prob = 0.2;
        assert_eq!(
            AdversaryModel::from_config(&c),
            Some(AdversaryModel::LinkCompromise(0.2))
        );
        c.adversary = AdversaryKind::Collusion;
        assert_eq!(AdversaryModel::from_config(&c), None);
        c.adversary_target = Some(2);
        assert_eq!(
            AdversaryModel::from_config(&c),
            Some(AdversaryModel::NeighborCollusion(NodeId(2)))
        );
    }
}
