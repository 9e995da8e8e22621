//! Deterministic discrete-event network.
//!
//! Every node lives in one arena indexed by [`NodeIdx`]. Registered
//! addresses are the arena index itself; attacker-fabricated addresses carry
//! the top bit, which no registration ever uses, so dialing them always fails.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::ident::{random_id_at_cpl, Cpl, NodeId};
use crate::node::{KademliaParams, Node, Reply, Request, Response};
use crate::publish::PublishStrategy;

pub type NodeIdx = u32;

pub const HOUR_MS: u64 = 3_600_000;
pub const MINUTE_MS: u64 = 60_000;

const FABRICATED_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnConfig {
    /// Mean online session, seconds.
    pub session_mean: f64,
    /// Mean offline pause, seconds.
    pub pause_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_honest: usize,
    pub keyspace_bits: u32,
    pub seed: u64,
    /// Uniform round-trip latency bounds, milliseconds.
    pub latency_model: (u64, u64),
    pub churn: Option<ChurnConfig>,
    /// Time after which a dial to a dead or fabricated address gives up.
    pub dial_timeout_ms: u64,
    /// Number of early nodes new joiners contact first.
    pub seed_nodes: usize,
    /// Full-network refresh passes run after the sequential join.
    pub settle_rounds: usize,
    /// Periodic routing refresh during `advance`; off when `None`.
    pub refresh_interval_s: Option<u64>,
    pub republish_interval_h: f64,
    pub expiry_h: f64,
    pub params: KademliaParams,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_honest: 13_239,
            keyspace_bits: 256,
            seed: 1,
            latency_model: (10, 100),
            churn: None,
            dial_timeout_ms: 2_000,
            seed_nodes: 4,
            settle_rounds: 1,
            refresh_interval_s: None,
            republish_interval_h: 22.0,
            expiry_h: 48.0,
            params: KademliaParams::default(),
        }
    }
}

impl NetworkConfig {
    /// Average network size from the measurement campaign this lab mirrors.
    pub const NS_AVERAGE: usize = 13_239;
    /// Lowest observed network size in the same campaign.
    pub const NS_LOWEST: usize = 12_347;

    pub fn with_size(n_honest: usize, seed: u64) -> Self {
        NetworkConfig {
            n_honest,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n_honest == 0 {
            return bad("n_honest must be positive");
        }
        if self.keyspace_bits != 256 {
            return bad("keyspace_bits must be 256");
        }
        if self.latency_model.0 > self.latency_model.1 {
            return bad("latency_model min exceeds max");
        }
        if let Some(c) = self.churn {
            if !(c.session_mean > 0.0 && c.pause_mean > 0.0) {
                return bad("churn means must be positive");
            }
        }
        if self.republish_interval_h <= 0.0 || self.expiry_h <= 0.0 {
            return bad("republish and expiry intervals must be positive");
        }
        if self.seed_nodes == 0 {
            return bad("at least one seed node is required");
        }
        self.params.validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: NetworkConfig = serde_json::from_str(s).map_err(|e| ConfigError::Json {
            path: "<string>".into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: NetworkConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn republish_ms(&self) -> u64 {
        (self.republish_interval_h * HOUR_MS as f64) as u64
    }

    pub fn expiry_ms(&self) -> u64 {
        (self.expiry_h * HOUR_MS as f64) as u64
    }
}

/// Simulated milliseconds since the network was created.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    fn set(&mut self, t: u64) {
        debug_assert!(t >= self.now, "clock moved backwards");
        self.now = t.max(self.now);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(pub u64);

impl Address {
    pub fn is_fabricated(&self) -> bool {
        self.0 & FABRICATED_BIT != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub node_id: NodeId,
    pub address: Address,
    /// Whether the address was registered when this endpoint was produced.
    pub reachable: bool,
}

impl Endpoint {
    /// Arena index behind a registered address.
    pub fn index(&self) -> Option<NodeIdx> {
        if self.address.is_fabricated() {
            None
        } else {
            Some(self.address.0 as NodeIdx)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delivered {
    pub response: Response,
    pub latency_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("dial failed after {after_ms} ms")]
pub struct DialFailure {
    pub after_ms: u64,
}

struct Scheduled<E> {
    at: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Time-ordered queue; ties pop in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: u64, event: E) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        self.heap.pop().map(|s| (s.at, s.event))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|s| s.at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum TimedEvent {
    Churn(NodeIdx),
    Republish(NodeIdx, NodeId),
    Refresh,
}

#[derive(Clone)]
pub struct Network {
    pub(crate) config: NetworkConfig,
    pub(crate) nodes: Vec<Node>,
    pub(crate) ids: Vec<NodeId>,
    pub(crate) online: Vec<bool>,
    pub(crate) index: BTreeMap<NodeId, NodeIdx>,
    /// Sybil identities per targeted content id.
    pub(crate) sybil_groups: BTreeMap<NodeId, Vec<NodeIdx>>,
    pub(crate) clock: SimClock,
    pub(crate) rng: ChaCha8Rng,
    n_honest: usize,
    churn_next: Vec<u64>,
    next_refresh: Option<u64>,
    messages: u64,
}

impl Network {
    /// A network with no nodes; `add_node` and `bootstrap` populate it.
    pub fn empty(config: NetworkConfig) -> Result<Network, ConfigError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let next_refresh = config.refresh_interval_s.map(|s| s * 1000);
        Ok(Network {
            config,
            nodes: Vec::new(),
            ids: Vec::new(),
            online: Vec::new(),
            index: BTreeMap::new(),
            sybil_groups: BTreeMap::new(),
            clock: SimClock::default(),
            rng,
            n_honest: 0,
            churn_next: Vec::new(),
            next_refresh,
            messages: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &KademliaParams {
        &self.config.params
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.now
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn honest_count(&self) -> usize {
        self.n_honest
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn node(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx as usize]
    }

    pub fn node_mut(&mut self, idx: NodeIdx) -> &mut Node {
        &mut self.nodes[idx as usize]
    }

    pub fn id(&self, idx: NodeIdx) -> NodeId {
        self.ids[idx as usize]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn index_of(&self, id: &NodeId) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn is_online(&self, idx: NodeIdx) -> bool {
        self.online[idx as usize]
    }

    pub fn set_online(&mut self, idx: NodeIdx, up: bool) {
        self.online[idx as usize] = up;
    }

    pub fn is_sybil(&self, idx: NodeIdx) -> bool {
        self.nodes[idx as usize].sybil.is_some()
    }

    pub fn honest_indices(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        (0..self.nodes.len() as NodeIdx).filter(move |i| !self.is_sybil(*i))
    }

    pub fn sybil_indices(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        (0..self.nodes.len() as NodeIdx).filter(move |i| self.is_sybil(*i))
    }

    pub fn sybil_group(&self, cid: &NodeId) -> &[NodeIdx] {
        self.sybil_groups.get(cid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn endpoint(&self, idx: NodeIdx) -> Endpoint {
        Endpoint {
            node_id: self.ids[idx as usize],
            address: Address(idx as u64),
            reachable: true,
        }
    }

    /// A random address that no node will ever register.
    pub fn fabricate_endpoint(&mut self, node_id: NodeId) -> Endpoint {
        let raw: u64 = self.rng.random();
        Endpoint {
            node_id,
            address: Address(raw | FABRICATED_BIT),
            reachable: false,
        }
    }

    pub fn is_registered(&self, address: Address) -> bool {
        !address.is_fabricated() && (address.0 as usize) < self.nodes.len()
    }

    pub(crate) fn resolve(&self, endpoint: &Endpoint) -> Option<NodeIdx> {
        let idx = endpoint.index()?;
        if (idx as usize) < self.nodes.len() && self.ids[idx as usize] == endpoint.node_id {
            Some(idx)
        } else {
            None
        }
    }

    /// Registers a node without contacting anyone.
    pub fn add_node(&mut self, id: NodeId, node: Node) -> NodeIdx {
        assert!(!self.index.contains_key(&id), "duplicate node id {id}");
        let idx = self.nodes.len() as NodeIdx;
        if node.sybil.is_none() {
            self.n_honest += 1;
        }
        self.nodes.push(node);
        self.ids.push(id);
        self.online.push(true);
        self.index.insert(id, idx);
        let next = match self.config.churn {
            Some(c) if self.nodes[idx as usize].sybil.is_none() => {
                self.clock.now + sample_exp_ms(&mut self.rng, c.session_mean)
            }
            _ => u64::MAX,
        };
        self.churn_next.push(next);
        idx
    }

    /// A fresh identifier not yet used by any node.
    pub fn fresh_id(&mut self) -> NodeId {
        loop {
            let id = NodeId::random(&mut self.rng);
            if !self.index.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn random_target(&mut self) -> NodeId {
        NodeId::random(&mut self.rng)
    }

    pub fn random_target_at_cpl(&mut self, of: &NodeId, cpl: u16) -> NodeId {
        random_id_at_cpl(of, Cpl::new(cpl).expect("cpl below 256"), &mut self.rng)
    }

    pub fn sample_latency(&mut self) -> u64 {
        let (lo, hi) = self.config.latency_model;
        self.rng.random_range(lo..=hi)
    }

    /// One request/response exchange between two registered nodes. The
    /// responder handles the request immediately; routing tables on both
    /// sides record the contact.
    pub(crate) fn exchange(
        &mut self,
        from: NodeIdx,
        to: NodeIdx,
        request: &Request,
    ) -> Result<(Reply, u64), u64> {
        self.messages += 1;
        if !self.online[to as usize] || !self.online[from as usize] {
            return Err(self.config.dial_timeout_ms);
        }
        let reply = self.serve(to, from, request);
        let latency = self.sample_latency();
        if self.nodes[from as usize].server_mode {
            self.observe_peer(to, from);
        }
        self.observe_peer(from, to);
        Ok((reply, latency))
    }

    /// Sends `message` from the node with id `from` to `to`.
    pub fn send(
        &mut self,
        from: &NodeId,
        to: &Endpoint,
        message: Request,
    ) -> Result<Delivered, DialFailure> {
        let fail = DialFailure {
            after_ms: self.config.dial_timeout_ms,
        };
        let Some(src) = self.index_of(from) else {
            return Err(fail);
        };
        let Some(dst) = self.resolve(to) else {
            self.messages += 1;
            return Err(fail);
        };
        match self.exchange(src, dst, &message) {
            Ok((reply, latency_ms)) => Ok(Delivered {
                response: reply.into_response(self),
                latency_ms,
            }),
            Err(after_ms) => Err(DialFailure { after_ms }),
        }
    }

    /// Advances virtual time by `dt_ms`, running republication, churn and
    /// routing refresh events in order, then drops expired records.
    pub fn advance(&mut self, dt_ms: u64) {
        if dt_ms == 0 {
            return;
        }
        let end = self.clock.now.saturating_add(dt_ms);
        let mut queue: EventQueue<TimedEvent> = EventQueue::new();
        let republish = self.config.republish_ms();
        for (i, node) in self.nodes.iter().enumerate() {
            for p in &node.provided {
                let due = p.last_published + republish;
                if due <= end {
                    queue.push(due, TimedEvent::Republish(i as NodeIdx, p.cid));
                }
            }
            if self.churn_next[i] <= end {
                queue.push(self.churn_next[i], TimedEvent::Churn(i as NodeIdx));
            }
        }
        if let Some(t) = self.next_refresh {
            if t <= end {
                queue.push(t, TimedEvent::Refresh);
            }
        }
        while let Some((at, event)) = queue.pop() {
            self.clock.set(at);
            match event {
                TimedEvent::Churn(i) => {
                    let c = self.config.churn.expect("churn events need a churn model");
                    let up = !self.online[i as usize];
                    self.online[i as usize] = up;
                    let mean = if up { c.session_mean } else { c.pause_mean };
                    let next = at + sample_exp_ms(&mut self.rng, mean);
                    self.churn_next[i as usize] = next;
                    if next <= end {
                        queue.push(next, TimedEvent::Churn(i));
                    }
                }
                TimedEvent::Republish(i, cid) => {
                    let strategy = self.nodes[i as usize]
                        .provided
                        .iter()
                        .find(|p| p.cid == cid)
                        .map(|p| p.strategy);
                    if let Some(strategy) = strategy {
                        if self.online[i as usize] {
                            crate::publish::republish(self, i, cid, strategy);
                        }
                        let due = at + republish;
                        for p in self.nodes[i as usize].provided.iter_mut() {
                            if p.cid == cid {
                                p.last_published = at;
                            }
                        }
                        if due <= end {
                            queue.push(due, TimedEvent::Republish(i, cid));
                        }
                    }
                }
                TimedEvent::Refresh => {
                    self.refresh_all();
                    let step = self.config.refresh_interval_s.unwrap_or(600) * 1000;
                    let next = at + step;
                    self.next_refresh = Some(next);
                    if next <= end {
                        queue.push(next, TimedEvent::Refresh);
                    }
                }
            }
        }
        self.clock.set(end);
        self.purge_expired();
    }

    /// Drops every record older than the expiry interval.
    pub fn purge_expired(&mut self) {
        let now = self.clock.now;
        let ttl = self.config.expiry_ms();
        for node in self.nodes.iter_mut() {
            node.purge_expired(now, ttl);
        }
    }

    /// Routing refresh of every online honest node.
    pub fn refresh_all(&mut self) {
        for i in 0..self.nodes.len() as NodeIdx {
            if self.online[i as usize] && !self.is_sybil(i) {
                crate::node::refresh(self, i);
            }
        }
    }

    /// Routing refresh of every online node, Sybils included.
    pub fn refresh_everyone(&mut self) {
        for i in 0..self.nodes.len() as NodeIdx {
            if self.online[i as usize] {
                crate::node::refresh(self, i);
            }
        }
    }

    /// Brute-force `count` nearest registered nodes to `target`, optionally
    /// restricted by `keep`.
    pub fn true_closest(
        &self,
        target: &NodeId,
        count: usize,
        keep: impl Fn(NodeIdx) -> bool,
    ) -> Vec<NodeIdx> {
        let mut all: Vec<_> = (0..self.nodes.len() as NodeIdx)
            .filter(|i| keep(*i))
            .map(|i| (self.ids[i as usize].distance(target), i))
            .collect();
        let count = count.min(all.len());
        if count == 0 {
            return Vec::new();
        }
        all.select_nth_unstable(count - 1);
        all.truncate(count);
        all.sort_unstable();
        all.into_iter().map(|(_, i)| i).collect()
    }

    pub(crate) fn observe_peer(&mut self, at: NodeIdx, peer: NodeIdx) {
        if at == peer {
            return;
        }
        let k = self.config.params.k;
        let own = self.ids[at as usize];
        let bucket = crate::ident::cpl(&own, &self.ids[peer as usize]).index();
        let online = &self.online;
        self.nodes[at as usize]
            .table
            .observe(k, bucket, peer, |p| online[p as usize]);
    }
}

fn sample_exp_ms<R: Rng + ?Sized>(rng: &mut R, mean_s: f64) -> u64 {
    let exp = Exp::new(1.0 / mean_s).expect("positive mean");
    (exp.sample(rng) * 1000.0).max(1.0) as u64
}

/// Builds `config.n_honest` honest nodes that join one after another, each
/// bootstrapping through the first `seed_nodes` members, followed by
/// `settle_rounds` network-wide refresh passes.
pub fn build_network(config: NetworkConfig) -> Result<Network, ConfigError> {
    let mut net = Network::empty(config)?;
    let n = net.config.n_honest;
    let seeds = net.config.seed_nodes;
    for i in 0..n {
        let id = net.fresh_id();
        let idx = net.add_node(id, Node::honest());
        for s in 0..seeds.min(i) {
            net.observe_peer(idx, s as NodeIdx);
        }
        if i > 0 {
            crate::node::bootstrap(&mut net, idx);
        }
    }
    for _ in 0..net.config.settle_rounds {
        net.refresh_all();
    }
    Ok(net)
}

/// Marks a republishing provider; `advance` re-announces it every interval.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provided {
    pub cid: NodeId,
    pub strategy: PublishStrategy,
    pub last_published: u64,
}
