//! Random key pre-distribution with per-source permuted key banks.
//!
//! Every source is loaded with the same pool of `K` keys. The first `K - k`
//! are shared with the aggregator and the remaining `k` are reserved for
//! source-to-source links. Because every source holds the same raw keys,
//! each source's aggregator bank is stored in a private random order that
//! only the server knows. A source opens a session by announcing a random
//! index in plaintext; the index names a different key at every source.
//!
//! Pairwise keys are set up through the server: both endpoints draw a random
//! ordering of the `k` source keys, swap them over their aggregator sessions,
//! and one endpoint announces an index into the composed ordering.
//!
//! Keys are opaque 128-bit identifiers. Nothing here encrypts anything;
//! confidentiality is modelled by key possession in [`crate::simnet`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::NodeId;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("key bank needs 0 < source_keys < total_keys, got K={total}, k={reserved}")]
    InvalidConfig { total: usize, reserved: usize },
    #[error("key bank does not match config: expected {expected_aggregator}+{expected_reserved} keys, got {aggregator}+{reserved}")]
    ConfigMismatch {
        expected_aggregator: usize,
        expected_reserved: usize,
        aggregator: usize,
        reserved: usize,
    },
    #[error("key bank contains duplicate key values")]
    DuplicateKeys,
    #[error("source {0} has not been provisioned")]
    UnknownSource(NodeId),
    #[error("key index {index} outside [1, {size}]")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("source {0} holds no aggregator session key")]
    MissingAggregatorSession(NodeId),
    #[error("a pairwise key needs two distinct sources, got {0} twice")]
    SelfPair(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBankConfig {
    total_keys: usize,
    source_keys: usize,
}

impl KeyBankConfig {
    pub fn new(total_keys: usize, source_keys: usize) -> Result<Self, KeyError> {
        if source_keys == 0 || source_keys >= total_keys {
            return Err(KeyError::InvalidConfig {
                total: total_keys,
                reserved: source_keys,
            });
        }
        Ok(KeyBankConfig {
            total_keys,
            source_keys,
        })
    }

    pub fn total_keys(&self) -> usize {
        self.total_keys
    }

    pub fn source_keys(&self) -> usize {
        self.source_keys
    }

    /// `K - k`.
    pub fn aggregator_keys(&self) -> usize {
        self.total_keys - self.source_keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyValue(pub u128);

impl fmt::Display for KeyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// The deployment-wide key pool in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBank {
    pub aggregator_keys: Vec<KeyValue>,
    pub source_keys: Vec<KeyValue>,
}

impl KeyBank {
    /// Draws `K` distinct key values.
    pub fn generate<R: Rng + ?Sized>(config: KeyBankConfig, rng: &mut R) -> Self {
        let mut seen = BTreeSet::new();
        let mut keys = Vec::with_capacity(config.total_keys);
        while keys.len() < config.total_keys {
            let k = KeyValue(rng.gen());
            if seen.insert(k) {
                keys.push(k);
            }
        }
        let source_keys = keys.split_off(config.aggregator_keys());
        KeyBank {
            aggregator_keys: keys,
            source_keys,
        }
    }

    pub fn check(&self, config: KeyBankConfig) -> Result<(), KeyError> {
        if self.aggregator_keys.len() != config.aggregator_keys()
            || self.source_keys.len() != config.source_keys
        {
            return Err(KeyError::ConfigMismatch {
                expected_aggregator: config.aggregator_keys(),
                expected_reserved: config.source_keys,
                aggregator: self.aggregator_keys.len(),
                reserved: self.source_keys.len(),
            });
        }
        let distinct: BTreeSet<_> = self
            .aggregator_keys
            .iter()
            .chain(&self.source_keys)
            .collect();
        if distinct.len() != config.total_keys {
            return Err(KeyError::DuplicateKeys);
        }
        Ok(())
    }
}

/// A reordering of a bank: position `i` of the reordered bank holds the
/// canonical entry `mapping[i]` (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Permutation { mapping }
    }

    /// Returns `None` unless `mapping` is a bijection on `0..len`.
    pub fn from_mapping(mapping: Vec<usize>) -> Option<Self> {
        let p = Permutation { mapping };
        p.is_bijective().then_some(p)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_bijective(&self) -> bool {
        let mut sorted = self.mapping.clone();
        sorted.sort_unstable();
        sorted.iter().copied().eq(0..self.mapping.len())
    }

    /// Canonical position addressed by reordered position `pos`.
    #[inline]
    pub fn at(&self, pos: usize) -> usize {
        self.mapping[pos]
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.len(), "permutation length mismatch");
        self.mapping.iter().map(|&i| items[i].clone()).collect()
    }

    /// The ordering obtained by reordering with `self` first and then with
    /// `outer`: `self.then(outer).apply(x) == outer.apply(&self.apply(x))`.
    pub fn then(&self, outer: &Permutation) -> Permutation {
        assert_eq!(self.len(), outer.len(), "permutation length mismatch");
        Permutation {
            mapping: outer.mapping.iter().map(|&i| self.mapping[i]).collect(),
        }
    }
}

/// One-based index into a bank, announced in plaintext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyIndex(u32);

impl KeyIndex {
    pub fn new(index: usize, bank_size: usize) -> Result<Self, KeyError> {
        if index == 0 || index > bank_size {
            return Err(KeyError::IndexOutOfRange {
                index,
                size: bank_size,
            });
        }
        Ok(KeyIndex(index as u32))
    }

    pub fn random<R: Rng + ?Sized>(bank_size: usize, rng: &mut R) -> Self {
        assert!(bank_size > 0);
        KeyIndex(rng.gen_range(1..=bank_size) as u32)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    fn position(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for KeyIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Which two principals share a session key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyScope {
    /// Source to aggregator.
    Aggregator(NodeId),
    /// Source to source; stored with the smaller id first.
    Pair(NodeId, NodeId),
}

impl KeyScope {
    pub fn pair(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            KeyScope::Pair(a, b)
        } else {
            KeyScope::Pair(b, a)
        }
    }
}

/// Names a session key without revealing it. Session keys live for one
/// aggregation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyId {
    pub scope: KeyScope,
    pub round: u32,
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            KeyScope::Aggregator(s) => write!(f, "agg:{s}:r{}", self.round),
            KeyScope::Pair(a, b) => write!(f, "pair:{a}-{b}:r{}", self.round),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub id: KeyId,
    pub key: KeyValue,
}

/// Draws a private ordering of the aggregator keys for one source.
///
/// Returns the source-side reordered bank and the permutation record the
/// server keeps for that source.
pub fn provision_source<R: Rng + ?Sized>(
    config: KeyBankConfig,
    bank: &KeyBank,
    rng: &mut R,
) -> Result<(Vec<KeyValue>, Permutation), KeyError> {
    bank.check(config)?;
    let perm = Permutation::random(config.aggregator_keys(), rng);
    Ok((perm.apply(&bank.aggregator_keys), perm))
}

/// Key material held by one source.
#[derive(Debug, Clone)]
pub struct SourceKeyring {
    pub id: NodeId,
    aggregator_bank: Vec<KeyValue>,
    source_bank: Vec<KeyValue>,
    aggregator_session: Option<SessionKey>,
    pairwise: BTreeMap<NodeId, SessionKey>,
}

impl SourceKeyring {
    pub fn aggregator_bank(&self) -> &[KeyValue] {
        &self.aggregator_bank
    }

    pub fn source_bank(&self) -> &[KeyValue] {
        &self.source_bank
    }

    pub fn aggregator_session(&self) -> Option<&SessionKey> {
        self.aggregator_session.as_ref()
    }

    pub fn pairwise_with(&self, peer: NodeId) -> Option<&SessionKey> {
        self.pairwise.get(&peer)
    }
}

/// Server-side key state.
#[derive(Debug, Clone, Default)]
pub struct ServerKeyDirectory {
    aggregator_bank: Vec<KeyValue>,
    permutations: BTreeMap<NodeId, Permutation>,
    sessions: BTreeMap<NodeId, SessionKey>,
}

impl ServerKeyDirectory {
    pub fn permutation(&self, source: NodeId) -> Option<&Permutation> {
        self.permutations.get(&source)
    }

    pub fn session(&self, source: NodeId) -> Option<&SessionKey> {
        self.sessions.get(&source)
    }

    pub fn provisioned(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.permutations.keys().copied()
    }

    /// Looks up the key a source selected by announcing `index`.
    pub fn resolve_aggregator_key(
        &self,
        source: NodeId,
        index: KeyIndex,
        round: u32,
    ) -> Result<SessionKey, KeyError> {
        let perm = self
            .permutations
            .get(&source)
            .ok_or(KeyError::UnknownSource(source))?;
        if index.get() > perm.len() {
            return Err(KeyError::IndexOutOfRange {
                index: index.get(),
                size: perm.len(),
            });
        }
        Ok(SessionKey {
            id: KeyId {
                scope: KeyScope::Aggregator(source),
                round,
            },
            key: self.aggregator_bank[perm.at(index.position())],
        })
    }
}

/// What travelled during a pairwise establishment; the protocol layer turns
/// this into relayed messages.
#[derive(Debug, Clone)]
pub struct PairwiseExchange {
    pub initiator: NodeId,
    pub responder: NodeId,
    pub initiator_perm: Permutation,
    pub responder_perm: Permutation,
    pub index: KeyIndex,
    pub key: SessionKey,
}

/// Key for source-source index `index` under the two endpoints' orderings:
/// the canonical source bank reordered by `first` and then by `second`.
pub fn resolve_pairwise_key(
    source_bank: &[KeyValue],
    first: &Permutation,
    second: &Permutation,
    index: KeyIndex,
) -> Result<KeyValue, KeyError> {
    if index.get() > source_bank.len() {
        return Err(KeyError::IndexOutOfRange {
            index: index.get(),
            size: source_bank.len(),
        });
    }
    Ok(source_bank[first.then(second).at(index.position())])
}

/// What a bystander that holds the raw source bank but neither endpoint's
/// ordering would guess for `index`: the entry at that position of its own
/// ordering.
pub fn bystander_guess(
    source_bank: &[KeyValue],
    own_order: &Permutation,
    index: KeyIndex,
) -> KeyValue {
    source_bank[own_order.at(index.position())]
}

/// Counts over all `n!` orderings and all `n` indices how often a guesser
/// without the ordering (reading `index` against canonical order) picks the
/// key that `index` really names. Returns `(hits, trials)`.
pub fn exhaustive_index_guess(n: usize) -> (u64, u64) {
    assert!(
        (1..=8).contains(&n),
        "exhaustive check only for small banks"
    );
    let bank: Vec<KeyValue> = (0..n as u128).map(KeyValue).collect();
    let mut hits = 0u64;
    let mut trials = 0u64;
    let mut mapping: Vec<usize> = (0..n).collect();
    for_each_permutation(&mut mapping, 0, &mut |m| {
        let perm = Permutation {
            mapping: m.to_vec(),
        };
        let reordered = perm.apply(&bank);
        for pos in 0..n {
            trials += 1;
            let index = KeyIndex(pos as u32 + 1);
            if bank[index.position()] == reordered[index.position()] {
                hits += 1;
            }
        }
    });
    (hits, trials)
}

fn for_each_permutation(items: &mut [usize], start: usize, f: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        f(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        for_each_permutation(items, start + 1, f);
        items.swap(start, i);
    }
}

/// A provisioned deployment: the shared pool, the server directory, and
/// every source's keyring. Provisioning of source `s` draws from a generator
/// derived from `(seed, s)`, so it is reproducible and sources can be added
/// one at a time.
#[derive(Debug, Clone)]
pub struct KeyDeployment {
    config: KeyBankConfig,
    bank: KeyBank,
    seed: u64,
    directory: ServerKeyDirectory,
    sources: BTreeMap<NodeId, SourceKeyring>,
}

impl KeyDeployment {
    pub fn new(config: KeyBankConfig, seed: u64) -> Self {
        let bank = KeyBank::generate(config, &mut rng::derive(seed, Stream::KeyBank, 0));
        Self::with_bank(config, bank, seed).expect("generated bank matches its config")
    }

    pub fn with_bank(config: KeyBankConfig, bank: KeyBank, seed: u64) -> Result<Self, KeyError> {
        bank.check(config)?;
        Ok(KeyDeployment {
            config,
            directory: ServerKeyDirectory {
                aggregator_bank: bank.aggregator_keys.clone(),
                ..Default::default()
            },
            bank,
            seed,
            sources: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> KeyBankConfig {
        self.config
    }

    pub fn bank(&self) -> &KeyBank {
        &self.bank
    }

    pub fn directory(&self) -> &ServerKeyDirectory {
        &self.directory
    }

    pub fn keyring(&self, source: NodeId) -> Option<&SourceKeyring> {
        self.sources.get(&source)
    }

    pub fn provision_source(&mut self, source: NodeId) -> Result<&Permutation, KeyError> {
        let mut rng = rng::derive(self.seed, Stream::Provision, source.0 as u64);
        let (aggregator_bank, perm) = provision_source(self.config, &self.bank, &mut rng)?;
        self.sources.insert(
            source,
            SourceKeyring {
                id: source,
                aggregator_bank,
                source_bank: self.bank.source_keys.clone(),
                aggregator_session: None,
                pairwise: BTreeMap::new(),
            },
        );
        self.directory.permutations.insert(source, perm);
        Ok(&self.directory.permutations[&source])
    }

    /// Source side of a new aggregator session: draws a fresh index and
    /// picks that entry of the source's own reordered bank.
    pub fn select_aggregator_key<R: Rng + ?Sized>(
        &mut self,
        source: NodeId,
        round: u32,
        rng: &mut R,
    ) -> Result<(KeyIndex, SessionKey), KeyError> {
        let ring = self
            .sources
            .get_mut(&source)
            .ok_or(KeyError::UnknownSource(source))?;
        let index = KeyIndex::random(ring.aggregator_bank.len(), rng);
        let key = SessionKey {
            id: KeyId {
                scope: KeyScope::Aggregator(source),
                round,
            },
            key: ring.aggregator_bank[index.position()],
        };
        ring.aggregator_session = Some(key);
        Ok((index, key))
    }

    /// Server side: resolves the announced index and records the session.
    pub fn accept_aggregator_key(
        &mut self,
        source: NodeId,
        index: KeyIndex,
        round: u32,
    ) -> Result<SessionKey, KeyError> {
        let key = self
            .directory
            .resolve_aggregator_key(source, index, round)?;
        self.directory.sessions.insert(source, key);
        Ok(key)
    }

    /// Both endpoints draw an ordering of the source bank, exchange them over
    /// their aggregator sessions, and `a` announces an index into the
    /// composed ordering. Each endpoint derives the key on its own.
    pub fn establish_pairwise_key<R: Rng + ?Sized>(
        &mut self,
        a: NodeId,
        b: NodeId,
        round: u32,
        rng: &mut R,
    ) -> Result<PairwiseExchange, KeyError> {
        if a == b {
            return Err(KeyError::SelfPair(a));
        }
        for s in [a, b] {
            let ring = self.sources.get(&s).ok_or(KeyError::UnknownSource(s))?;
            let at_source = ring.aggregator_session.map(|k| k.id.round);
            let at_server = self.directory.sessions.get(&s).map(|k| k.id.round);
            if at_source != Some(round) || at_server != Some(round) {
                return Err(KeyError::MissingAggregatorSession(s));
            }
        }
        let k = self.config.source_keys;
        let perm_a = Permutation::random(k, rng);
        let perm_b = Permutation::random(k, rng);
        let index = KeyIndex::random(k, rng);
        let id = KeyId {
            scope: KeyScope::pair(a, b),
            round,
        };

        let key_at_a =
            resolve_pairwise_key(&self.sources[&a].source_bank, &perm_a, &perm_b, index)?;
        let key_at_b =
            resolve_pairwise_key(&self.sources[&b].source_bank, &perm_a, &perm_b, index)?;
        debug_assert_eq!(key_at_a, key_at_b);

        let key_a = SessionKey { id, key: key_at_a };
        let key_b = SessionKey { id, key: key_at_b };
        self.sources.get_mut(&a).unwrap().pairwise.insert(b, key_a);
        self.sources.get_mut(&b).unwrap().pairwise.insert(a, key_b);
        Ok(PairwiseExchange {
            initiator: a,
            responder: b,
            initiator_perm: perm_a,
            responder_perm: perm_b,
            index,
            key: key_a,
        })
    }

    /// Drops every session key; the next round re-establishes from scratch.
    pub fn end_round(&mut self) {
        self.directory.sessions.clear();
        for ring in self.sources.values_mut() {
            ring.aggregator_session = None;
            ring.pairwise.clear();
        }
    }
}
