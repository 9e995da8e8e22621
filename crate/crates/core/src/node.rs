//! Per-node state and request handlers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::ident::{cpl, NodeId};
use crate::lookup::{lookup, LookupPolicy, LookupResult};
use crate::publish::PublisherState;
use crate::simnet::{Endpoint, Network, NodeIdx, Provided};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KademliaParams {
    /// Bucket size and replication factor.
    pub k: usize,
    /// Queries in flight per lookup path.
    pub alpha: usize,
    /// Closest candidates that must have answered before a lookup ends.
    pub beta: usize,
}

impl Default for KademliaParams {
    fn default() -> Self {
        KademliaParams {
            k: 20,
            alpha: 10,
            beta: 3,
        }
    }
}

impl KademliaParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beta == 0 || self.k < self.beta || self.alpha == 0 {
            return Err(ConfigError::Invalid(format!(
                "need k >= beta >= 1 and alpha >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Number of buckets refreshed with random lookups during bootstrap.
pub const REFRESHED_BUCKETS: u16 = 16;

/// Array of buckets, bucket `i` holding peers sharing exactly `i` leading
/// bits with the owner. Each bucket is ordered least recently seen first.
/// Buckets are allocated on demand; peers are arena indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingTable {
    buckets: Vec<Vec<NodeIdx>>,
    pub last_refresh: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observed {
    /// Already present; moved to the most recently seen position.
    Refreshed,
    Added,
    /// The least recently seen peer was unreachable and got replaced.
    Replaced(NodeIdx),
    /// Bucket full of live peers; newcomer ignored.
    Dropped,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bucket(&self, i: usize) -> &[NodeIdx] {
        self.buckets.get(i).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of allocated buckets; higher indices are empty.
    pub fn depth(&self) -> usize {
        self.buckets.len()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeIdx> + '_ {
        self.buckets.iter().flat_map(|b| b.iter().copied())
    }

    pub fn contains(&self, bucket: usize, peer: NodeIdx) -> bool {
        self.bucket(bucket).contains(&peer)
    }

    pub fn clear(&mut self) {
        self.buckets.clear();
    }

    /// Records a contact with `peer`. A full bucket pings its least recently
    /// seen entry through `alive` and only replaces it when the ping fails.
    pub fn observe(
        &mut self,
        k: usize,
        bucket: usize,
        peer: NodeIdx,
        alive: impl Fn(NodeIdx) -> bool,
    ) -> Observed {
        if self.buckets.len() <= bucket {
            self.buckets.resize_with(bucket + 1, Vec::new);
        }
        let b = &mut self.buckets[bucket];
        if let Some(pos) = b.iter().position(|p| *p == peer) {
            let p = b.remove(pos);
            b.push(p);
            return Observed::Refreshed;
        }
        if b.len() < k {
            b.push(peer);
            return Observed::Added;
        }
        let oldest = b[0];
        if alive(oldest) {
            b.remove(0);
            b.push(oldest);
            Observed::Dropped
        } else {
            b.remove(0);
            b.push(peer);
            Observed::Replaced(oldest)
        }
    }

    pub fn remove(&mut self, bucket: usize, peer: NodeIdx) -> bool {
        if let Some(b) = self.buckets.get_mut(bucket) {
            if let Some(pos) = b.iter().position(|p| *p == peer) {
                b.remove(pos);
                return true;
            }
        }
        false
    }

    /// Drops every peer for which `alive` is false and returns how many.
    pub fn retain_alive(&mut self, alive: impl Fn(NodeIdx) -> bool) -> usize {
        let mut dropped = 0;
        for b in self.buckets.iter_mut() {
            let before = b.len();
            b.retain(|p| alive(*p));
            dropped += before - b.len();
        }
        dropped
    }

    /// Up to `count` known peers closest to `target`, ascending by distance,
    /// skipping `exclude`.
    ///
    /// With `b = cpl(owner, target)`, bucket `b` holds every peer sharing more
    /// than `b` bits with the target, buckets above `b` share exactly `b`, and
    /// bucket `j < b` shares exactly `j`. Visiting buckets in that order means
    /// only a handful of buckets get sorted.
    pub fn closest(
        &self,
        owner: &NodeId,
        target: &NodeId,
        count: usize,
        ids: &[NodeId],
        exclude: Option<NodeIdx>,
    ) -> Vec<NodeIdx> {
        let b = cpl(owner, target).index();
        let depth = self.buckets.len();
        let mut out: Vec<NodeIdx> = Vec::with_capacity(count);
        let mut group: Vec<(crate::ident::Distance, NodeIdx)> = Vec::with_capacity(4 * count);
        let flush = |group: &mut Vec<(crate::ident::Distance, NodeIdx)>, out: &mut Vec<NodeIdx>| {
            let need = count - out.len();
            if group.len() > need {
                group.select_nth_unstable(need);
                group.truncate(need);
            }
            group.sort_unstable();
            for (_, p) in group.drain(..) {
                if out.len() == count {
                    break;
                }
                out.push(p);
            }
        };
        let gather = |i: usize, group: &mut Vec<(crate::ident::Distance, NodeIdx)>| {
            for p in &self.buckets[i] {
                if Some(*p) != exclude {
                    group.push((ids[*p as usize].distance(target), *p));
                }
            }
        };
        if b < depth {
            gather(b, &mut group);
            flush(&mut group, &mut out);
        }
        if out.len() < count && b + 1 < depth {
            for j in b + 1..depth {
                gather(j, &mut group);
            }
            flush(&mut group, &mut out);
        }
        for j in (0..b.min(depth)).rev() {
            if out.len() >= count {
                break;
            }
            gather(j, &mut group);
            flush(&mut group, &mut out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRecord {
    pub cid: NodeId,
    pub provider: NodeId,
    pub endpoint: Endpoint,
    pub stored_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SybilMode {
    /// Stores targeted records and claims to have none.
    Passive,
    /// Answers targeted provider queries with fabricated records.
    Active,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SybilBehavior {
    pub mode: SybilMode,
    pub targets: BTreeSet<NodeId>,
    pub fake_records_per_reply: usize,
}

impl SybilBehavior {
    pub const FAKE_RECORDS_PER_REPLY: usize = 10;

    pub fn new(mode: SybilMode, target: NodeId) -> Self {
        SybilBehavior {
            mode,
            targets: BTreeSet::from([target]),
            fake_records_per_reply: Self::FAKE_RECORDS_PER_REPLY,
        }
    }

    pub fn targets(&self, cid: &NodeId) -> bool {
        self.targets.contains(cid)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Node {
    pub table: RoutingTable,
    /// Provider records by content id, one entry per provider.
    pub store: BTreeMap<NodeId, Vec<ProviderRecord>>,
    pub sybil: Option<SybilBehavior>,
    /// Server-mode nodes get added to the routing tables of peers they query.
    pub server_mode: bool,
    /// Content this node provides and republishes.
    pub provided: Vec<Provided>,
    pub publisher: Option<PublisherState>,
}

impl Node {
    pub fn honest() -> Self {
        Node {
            server_mode: true,
            ..Default::default()
        }
    }

    pub fn client() -> Self {
        Node::default()
    }

    pub fn sybil(behavior: SybilBehavior) -> Self {
        Node {
            server_mode: true,
            sybil: Some(behavior),
            ..Default::default()
        }
    }

    pub fn records(&self, cid: &NodeId) -> &[ProviderRecord] {
        self.store.get(cid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn store_record(&mut self, record: ProviderRecord) {
        let list = self.store.entry(record.cid).or_default();
        match list.iter_mut().find(|r| r.provider == record.provider) {
            Some(existing) => *existing = record,
            None => list.push(record),
        }
    }

    pub fn purge_expired(&mut self, now: u64, ttl: u64) {
        self.store.retain(|_, list| {
            list.retain(|r| now.saturating_sub(r.stored_at) <= ttl);
            !list.is_empty()
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Ping,
    FindNode(NodeId),
    GetProviders(NodeId),
    AddProvider(ProviderRecord),
}

/// Handler output in arena form.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Reply {
    Pong,
    Peers(Vec<NodeIdx>),
    Providers {
        records: Vec<ProviderRecord>,
        closer: Vec<NodeIdx>,
    },
    Ack,
}

/// Handler output as seen on the wire.
#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Pong,
    Peers(Vec<Endpoint>),
    Providers {
        providers: Vec<ProviderRecord>,
        closer: Vec<Endpoint>,
    },
    Ack,
}

impl Reply {
    pub(crate) fn into_response(self, net: &Network) -> Response {
        let conv = |v: Vec<NodeIdx>| v.into_iter().map(|i| net.endpoint(i)).collect();
        match self {
            Reply::Pong => Response::Pong,
            Reply::Ack => Response::Ack,
            Reply::Peers(p) => Response::Peers(conv(p)),
            Reply::Providers { records, closer } => Response::Providers {
                providers: records,
                closer: conv(closer),
            },
        }
    }
}

impl Network {
    pub(crate) fn serve(&mut self, at: NodeIdx, from: NodeIdx, request: &Request) -> Reply {
        match request {
            Request::Ping => Reply::Pong,
            Request::FindNode(target) => Reply::Peers(self.closer_peers(at, target, Some(from))),
            Request::GetProviders(cid) => {
                let (records, closer) = self.provider_reply(at, cid, Some(from));
                Reply::Providers { records, closer }
            }
            Request::AddProvider(record) => {
                let mut record = record.clone();
                record.stored_at = self.clock.now();
                self.nodes[at as usize].store_record(record);
                Reply::Ack
            }
        }
    }

    fn closer_peers(&self, at: NodeIdx, target: &NodeId, requester: Option<NodeIdx>) -> Vec<NodeIdx> {
        let k = self.config.params.k;
        let node = &self.nodes[at as usize];
        let own = &self.ids[at as usize];
        let honest = || node.table.closest(own, target, k, &self.ids, requester);
        match &node.sybil {
            Some(s) if s.targets(target) => {
                let mut fellows: Vec<_> = self
                    .sybil_group(target)
                    .iter()
                    .copied()
                    .filter(|p| *p != at && Some(*p) != requester)
                    .map(|p| (self.ids[p as usize].distance(target), p))
                    .collect();
                fellows.sort_unstable();
                let mut out: Vec<NodeIdx> = fellows.into_iter().map(|(_, p)| p).take(k).collect();
                if out.len() < k {
                    for p in honest() {
                        if out.len() == k {
                            break;
                        }
                        if !out.contains(&p) {
                            out.push(p);
                        }
                    }
                }
                out
            }
            _ => honest(),
        }
    }

    fn provider_reply(
        &mut self,
        at: NodeIdx,
        cid: &NodeId,
        requester: Option<NodeIdx>,
    ) -> (Vec<ProviderRecord>, Vec<NodeIdx>) {
        let closer = self.closer_peers(at, cid, requester);
        let now = self.clock.now();
        let ttl = self.config.expiry_ms();
        let sybil = self.nodes[at as usize]
            .sybil
            .as_ref()
            .filter(|s| s.targets(cid))
            .map(|s| (s.mode, s.fake_records_per_reply));
        let records = match sybil {
            Some((SybilMode::Passive, _)) => Vec::new(),
            Some((SybilMode::Active, n)) => (0..n)
                .map(|_| {
                    let provider = NodeId::random(&mut self.rng);
                    ProviderRecord {
                        cid: *cid,
                        provider,
                        endpoint: self.fabricate_endpoint(provider),
                        stored_at: now,
                    }
                })
                .collect(),
            None => self.nodes[at as usize]
                .records(cid)
                .iter()
                .filter(|r| now.saturating_sub(r.stored_at) <= ttl)
                .cloned()
                .collect(),
        };
        (records, closer)
    }

    /// The `k` peers in `node`'s table closest to `target`, ascending.
    pub fn handle_find_node(&self, node: NodeIdx, target: &NodeId) -> Vec<Endpoint> {
        self.closer_peers(node, target, None)
            .into_iter()
            .map(|i| self.endpoint(i))
            .collect()
    }

    pub fn handle_get_providers(
        &mut self,
        node: NodeIdx,
        cid: &NodeId,
    ) -> (Vec<ProviderRecord>, Vec<Endpoint>) {
        let (records, closer) = self.provider_reply(node, cid, None);
        let closer = closer.into_iter().map(|i| self.endpoint(i)).collect();
        (records, closer)
    }

    pub fn handle_add_provider(&mut self, node: NodeIdx, record: ProviderRecord) {
        let mut record = record;
        record.stored_at = self.clock.now();
        self.nodes[node as usize].store_record(record);
    }

    /// Whether `record` points at a live honest node that really provides it.
    pub fn is_genuine_provider(&self, record: &ProviderRecord) -> bool {
        match self.resolve(&record.endpoint) {
            Some(i) => {
                !self.is_sybil(i)
                    && self.is_online(i)
                    && self.ids[i as usize] == record.provider
                    && self.nodes[i as usize].provided.iter().any(|p| p.cid == record.cid)
            }
            None => false,
        }
    }
}

/// One lookup toward a random id at each of the first sixteen bucket
/// indices, then a lookup toward the node's own id. Returns the sixteen
/// bucket lookups (used by distance estimators) followed by the self lookup.
pub fn bootstrap(net: &mut Network, idx: NodeIdx) -> Vec<LookupResult> {
    let own = net.id(idx);
    let policy = LookupPolicy::find_node();
    let mut results = Vec::with_capacity(REFRESHED_BUCKETS as usize + 1);
    for c in 0..REFRESHED_BUCKETS {
        let target = net.random_target_at_cpl(&own, c);
        results.push(lookup(net, idx, &target, &policy));
    }
    results.push(lookup(net, idx, &own, &policy));
    let now = net.now();
    net.node_mut(idx).table.last_refresh = now;
    results
}

/// Evicts unreachable peers, then repeats the bootstrap lookups.
pub fn refresh(net: &mut Network, idx: NodeIdx) -> Vec<LookupResult> {
    let online = net.online.clone();
    net.nodes[idx as usize]
        .table
        .retain_alive(|p| online[p as usize]);
    bootstrap(net, idx)
}

/// Forgets all routing state and bootstraps again from the seed nodes.
pub fn restart(net: &mut Network, idx: NodeIdx) -> Vec<LookupResult> {
    net.nodes[idx as usize].table.clear();
    let seeds = net.config.seed_nodes.min(net.len());
    for s in 0..seeds as NodeIdx {
        net.observe_peer(idx, s);
    }
    bootstrap(net, idx)
}
