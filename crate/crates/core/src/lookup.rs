//! Iterative lookups: closest-node search, provider search with the
//! record-count stop condition, and the disjoint-path variant.
//!
//! Each path keeps its candidates sorted by distance to the target. Up to
//! `alpha` queries are in flight per path, always to the closest peers not
//! yet contacted. A path converges once its `beta` closest live candidates
//! have all answered. Everything runs in virtual time on a private event
//! queue; the network clock itself is not moved.

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ident::{cpl, Distance, NodeId};
use crate::node::{ProviderRecord, Reply, Request};
use crate::simnet::{Endpoint, EventQueue, Network, NodeIdx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    FindNode,
    FindProviders,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookupPolicy {
    /// Collected records that stop a provider lookup.
    pub pr_max: usize,
    /// Records accepted from a single reply.
    pub pr_max_peer: usize,
    pub disjoint_paths: usize,
    /// Overall budget in simulated seconds.
    pub timeout_s: f64,
    pub mode: LookupMode,
    /// After convergence, query the unqueried members of the final top k.
    pub followup: bool,
    /// After a provider lookup fails, look up each unreachable provider once.
    pub chase_unreachable: bool,
}

impl Default for LookupPolicy {
    fn default() -> Self {
        LookupPolicy {
            pr_max: 10,
            pr_max_peer: 10,
            disjoint_paths: 1,
            timeout_s: 10.0,
            mode: LookupMode::FindNode,
            followup: true,
            chase_unreachable: true,
        }
    }
}

impl LookupPolicy {
    pub fn find_node() -> Self {
        Self::default()
    }

    pub fn find_providers() -> Self {
        LookupPolicy {
            mode: LookupMode::FindProviders,
            followup: false,
            ..Self::default()
        }
    }

    pub fn with_pr_max(mut self, pr_max: usize) -> Self {
        self.pr_max = pr_max;
        self
    }

    pub fn with_paths(mut self, d: usize) -> Self {
        self.disjoint_paths = d;
        self
    }

    pub fn with_timeout(mut self, seconds: f64) -> Self {
        self.timeout_s = seconds;
        self
    }

    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if self.pr_max < self.pr_max_peer || self.disjoint_paths == 0 || self.pr_max_peer == 0 {
            return Err(crate::error::ConfigError::Invalid(format!(
                "lookup policy needs pr_max >= pr_max_peer >= 1 and at least one path: {self:?}"
            )));
        }
        if !(self.timeout_s > 0.0) {
            return Err(crate::error::ConfigError::Invalid("timeout must be positive".into()));
        }
        Ok(())
    }

    fn timeout_ms(&self) -> u64 {
        (self.timeout_s * 1000.0) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BetaConvergence,
    ExternalStop,
    Timeout,
    Success,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::BetaConvergence => "beta_convergence",
            Termination::ExternalStop => "external_stop",
            Termination::Timeout => "timeout",
            Termination::Success => "success",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub path: usize,
    pub peer: NodeIdx,
    pub queried_id: NodeId,
    pub cpl_to_target: u16,
    pub n_providers_returned: usize,
    pub is_sybil: bool,
    pub sent_at_ms: u64,
    pub answered: bool,
    /// Virtual time of the reply, relative to the lookup start.
    pub answered_at_ms: Option<u64>,
    pub followup: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub endpoint: Endpoint,
    pub distance: Distance,
    /// Milliseconds after the lookup started.
    pub at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    /// `None` when another path already succeeded.
    pub terminated_by: Option<Termination>,
    pub contacted: usize,
    pub records: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupResult {
    pub target: NodeId,
    /// Up to k nearest known live nodes, ascending; may include the origin.
    pub closest: Vec<Endpoint>,
    pub providers: Vec<ProviderRecord>,
    /// Distinct nodes queried by the main search.
    pub contacted: usize,
    pub terminated_by: Termination,
    pub trace: Vec<TraceEntry>,
    /// Every peer heard of, in discovery order, including the origin's seeds.
    pub discovered: Vec<Discovery>,
    /// An honest provider was dialled within the timeout.
    pub success: bool,
    pub elapsed_ms: u64,
    pub paths: Vec<PathOutcome>,
    /// Lookups run for unreachable providers after the search ended.
    pub chase_lookups: usize,
    pub chase_contacted: usize,
}

impl LookupResult {
    pub fn closest_ids(&self) -> Vec<NodeId> {
        self.closest.iter().map(|e| e.node_id).collect()
    }

    pub fn closest_indices(&self) -> Vec<NodeIdx> {
        self.closest.iter().filter_map(Endpoint::index).collect()
    }

    /// Distance from the target to the `k`-th closest node found.
    pub fn kth_distance(&self, k: usize) -> Option<Distance> {
        self.closest
            .get(k.checked_sub(1)?)
            .map(|e| e.node_id.distance(&self.target))
    }

    pub fn total_contacted(&self) -> usize {
        self.contacted + self.chase_contacted
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "queried_id", "cpl_to_target", "n_providers_returned", "is_sybil"])?;
        for t in &self.trace {
            w.write_record([
                t.step.to_string(),
                t.queried_id.to_hex(),
                t.cpl_to_target.to_string(),
                t.n_providers_returned.to_string(),
                t.is_sybil.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Heard,
    Waiting,
    Queried,
    Failed,
    /// Queried by another path.
    Taken,
}

struct Cand {
    dist: Distance,
    idx: NodeIdx,
    state: State,
}

#[derive(Default)]
struct PathRun {
    cands: Vec<Cand>,
    known: HashSet<NodeIdx>,
    in_flight: usize,
    done: Option<Termination>,
    cut: bool,
    records: Vec<ProviderRecord>,
    seen_providers: HashSet<NodeId>,
    contacted: usize,
    success: bool,
}

impl PathRun {
    fn add(&mut self, idx: NodeIdx, dist: Distance) -> bool {
        if !self.known.insert(idx) {
            return false;
        }
        let pos = self
            .cands
            .partition_point(|c| (c.dist, c.idx) < (dist, idx));
        self.cands.insert(
            pos,
            Cand {
                dist,
                idx,
                state: State::Heard,
            },
        );
        true
    }

    fn set(&mut self, idx: NodeIdx, dist: Distance, state: State) {
        let pos = self.cands.partition_point(|c| (c.dist, c.idx) < (dist, idx));
        debug_assert_eq!(self.cands[pos].idx, idx);
        self.cands[pos].state = state;
    }

    fn converged(&self, beta: usize) -> bool {
        let mut answered = 0;
        for c in &self.cands {
            match c.state {
                State::Failed | State::Taken => continue,
                State::Queried => answered += 1,
                State::Heard | State::Waiting => return false,
            }
            if answered == beta {
                break;
            }
        }
        true
    }

    fn top_live(&self, k: usize) -> impl Iterator<Item = &Cand> {
        self.cands
            .iter()
            .filter(|c| !matches!(c.state, State::Failed | State::Taken))
            .take(k)
    }
}

struct Answer {
    path: usize,
    idx: NodeIdx,
    step: usize,
    reply: Option<Reply>,
    followup: bool,
}

struct Engine<'a> {
    net: &'a mut Network,
    origin: NodeIdx,
    target: NodeId,
    policy: &'a LookupPolicy,
    request: Request,
    paths: Vec<PathRun>,
    owner: HashMap<NodeIdx, usize>,
    queue: EventQueue<Answer>,
    trace: Vec<TraceEntry>,
    discovered: Vec<Discovery>,
    discovered_set: HashSet<NodeIdx>,
    timeout: u64,
    elapsed: u64,
}

impl<'a> Engine<'a> {
    fn note_discovery(&mut self, idx: NodeIdx, dist: Distance, at: u64) {
        if self.discovered_set.insert(idx) {
            self.discovered.push(Discovery {
                endpoint: self.net.endpoint(idx),
                distance: dist,
                at_ms: at,
            });
        }
    }

    fn send(&mut self, p: usize, idx: NodeIdx, now: u64, followup: bool) {
        let step = self.trace.len();
        let (reply, delay) = match self.net.exchange(self.origin, idx, &self.request) {
            Ok((reply, latency)) => (Some(reply), latency),
            Err(timeout) => (None, timeout),
        };
        let n_providers = match &reply {
            Some(Reply::Providers { records, .. }) => records.len(),
            _ => 0,
        };
        let id = self.net.id(idx);
        self.trace.push(TraceEntry {
            step,
            path: p,
            peer: idx,
            queried_id: id,
            cpl_to_target: cpl(&id, &self.target).get(),
            n_providers_returned: n_providers,
            is_sybil: self.net.is_sybil(idx),
            sent_at_ms: now,
            answered: false,
            answered_at_ms: None,
            followup,
        });
        self.paths[p].contacted += 1;
        self.queue.push(
            now + delay,
            Answer {
                path: p,
                idx,
                step,
                reply,
                followup,
            },
        );
    }

    fn fill(&mut self, p: usize, now: u64) {
        let alpha = self.net.params().alpha;
        while self.paths[p].in_flight < alpha && self.paths[p].done.is_none() {
            let mut pick = None;
            for i in 0..self.paths[p].cands.len() {
                let c = &self.paths[p].cands[i];
                if c.state != State::Heard {
                    continue;
                }
                match self.owner.get(&c.idx) {
                    Some(other) if *other != p => self.paths[p].cands[i].state = State::Taken,
                    _ => {
                        pick = Some(i);
                        break;
                    }
                }
            }
            let Some(i) = pick else { break };
            let idx = self.paths[p].cands[i].idx;
            self.paths[p].cands[i].state = State::Waiting;
            self.paths[p].in_flight += 1;
            self.owner.insert(idx, p);
            self.send(p, idx, now, false);
        }
        if self.paths[p].in_flight == 0 && self.paths[p].done.is_none() {
            self.paths[p].done = Some(Termination::BetaConvergence);
        }
    }

    fn absorb_records(&mut self, p: usize, records: Vec<ProviderRecord>, now: u64) {
        let cap = self.policy.pr_max_peer;
        for rec in records.into_iter().take(cap) {
            let path = &mut self.paths[p];
            if !path.seen_providers.insert(rec.provider) {
                continue;
            }
            let genuine = self.net.is_genuine_provider(&rec);
            self.paths[p].records.push(rec);
            if genuine {
                let dial = self.net.sample_latency();
                if now + dial <= self.timeout {
                    let path = &mut self.paths[p];
                    path.success = true;
                    path.done = Some(Termination::Success);
                    self.elapsed = self.elapsed.max(now + dial);
                    return;
                }
            }
            if self.paths[p].records.len() >= self.policy.pr_max {
                self.paths[p].done = Some(Termination::ExternalStop);
                return;
            }
        }
    }

    fn search(&mut self) {
        let k = self.net.params().k;
        let alpha = self.net.params().alpha;
        let beta = self.net.params().beta;
        let d = self.paths.len();
        let own = self.net.id(self.origin);
        let seed_count = if d == 1 { k.max(alpha) } else { alpha * d };
        let seeds = self.net.node(self.origin).table.closest(
            &own,
            &self.target,
            seed_count,
            self.net.ids(),
            Some(self.origin),
        );
        for (i, s) in seeds.into_iter().enumerate() {
            let dist = self.net.id(s).distance(&self.target);
            self.paths[i % d].add(s, dist);
            self.note_discovery(s, dist, 0);
        }
        for p in 0..d {
            self.fill(p, 0);
        }
        while let Some((now, ans)) = self.queue.pop() {
            if self.paths.iter().all(|p| p.done.is_some()) {
                self.queue.push(now, ans);
                break;
            }
            if now > self.timeout {
                for p in self.paths.iter_mut() {
                    if p.done.is_none() {
                        p.done = Some(Termination::Timeout);
                    }
                }
                self.elapsed = self.timeout;
                break;
            }
            self.elapsed = self.elapsed.max(now);
            let p = ans.path;
            self.paths[p].in_flight -= 1;
            if self.paths[p].done.is_some() {
                continue;
            }
            let dist = self.net.id(ans.idx).distance(&self.target);
            let closer = match ans.reply {
                None => {
                    self.paths[p].set(ans.idx, dist, State::Failed);
                    Vec::new()
                }
                Some(reply) => {
                    self.trace[ans.step].answered = true;
                    self.trace[ans.step].answered_at_ms = Some(now);
                    self.paths[p].set(ans.idx, dist, State::Queried);
                    match reply {
                        Reply::Peers(c) => c,
                        Reply::Providers { records, closer } => {
                            self.absorb_records(p, records, now);
                            closer
                        }
                        Reply::Pong | Reply::Ack => Vec::new(),
                    }
                }
            };
            if self.paths[p].success {
                for (q, path) in self.paths.iter_mut().enumerate() {
                    if q != p && path.done.is_none() {
                        path.done = Some(Termination::Success);
                        path.cut = true;
                    }
                }
                break;
            }
            for c in closer {
                if c == self.origin {
                    continue;
                }
                let dist = self.net.id(c).distance(&self.target);
                self.paths[p].add(c, dist);
                self.note_discovery(c, dist, now);
            }
            if self.paths[p].done.is_none() && self.paths[p].converged(beta) {
                self.paths[p].done = Some(Termination::BetaConvergence);
            }
            self.fill(p, now);
        }
    }

    /// Queries the unqueried members of each path's top k without expanding
    /// the candidate set, and collects answers still in flight.
    fn followup(&mut self) {
        let k = self.net.params().k;
        let start = self.elapsed;
        let mut wanted: HashSet<NodeIdx> = HashSet::default();
        for p in 0..self.paths.len() {
            if self.paths[p].done != Some(Termination::BetaConvergence) {
                continue;
            }
            let heard: Vec<NodeIdx> = self.paths[p]
                .top_live(k)
                .filter(|c| matches!(c.state, State::Heard | State::Waiting))
                .map(|c| c.idx)
                .collect();
            for idx in heard {
                wanted.insert(idx);
                let dist = self.net.id(idx).distance(&self.target);
                let pos = self.paths[p].cands.partition_point(|c| (c.dist, c.idx) < (dist, idx));
                if self.paths[p].cands[pos].state == State::Heard {
                    self.paths[p].cands[pos].state = State::Waiting;
                    self.send(p, idx, start, true);
                }
            }
        }
        while let Some((now, ans)) = self.queue.pop() {
            if now > self.timeout {
                self.elapsed = self.timeout;
                break;
            }
            if !wanted.contains(&ans.idx) {
                continue;
            }
            self.elapsed = self.elapsed.max(now);
            let dist = self.net.id(ans.idx).distance(&self.target);
            let state = if ans.reply.is_some() {
                self.trace[ans.step].answered = true;
                self.trace[ans.step].answered_at_ms = Some(now);
                State::Queried
            } else {
                State::Failed
            };
            let _ = ans.followup;
            self.paths[ans.path].set(ans.idx, dist, state);
        }
    }

    fn finish(mut self) -> LookupResult {
        let k = self.net.params().k;
        let own = self.net.id(self.origin);
        let mut best: Vec<(Distance, NodeIdx)> = vec![(own.distance(&self.target), self.origin)];
        for p in &self.paths {
            best.extend(p.top_live(k).map(|c| (c.dist, c.idx)));
        }
        best.sort_unstable();
        best.dedup();
        best.truncate(k);
        let closest = best.into_iter().map(|(_, i)| self.net.endpoint(i)).collect();

        let terminated_by = if self.paths.iter().any(|p| p.success) {
            Termination::Success
        } else if self.paths.iter().any(|p| p.done == Some(Termination::Timeout)) {
            Termination::Timeout
        } else if self.paths.iter().any(|p| p.done == Some(Termination::ExternalStop)) {
            Termination::ExternalStop
        } else {
            Termination::BetaConvergence
        };
        let success = terminated_by == Termination::Success;
        let mut providers = Vec::new();
        let mut outcomes = Vec::new();
        for p in self.paths.iter_mut() {
            outcomes.push(PathOutcome {
                terminated_by: if p.cut { None } else { p.done },
                contacted: p.contacted,
                records: p.records.len(),
                success: p.success,
            });
            providers.append(&mut p.records);
        }
        let contacted = outcomes.iter().map(|o| o.contacted).sum();

        let mut result = LookupResult {
            target: self.target,
            closest,
            providers,
            contacted,
            terminated_by,
            trace: self.trace,
            discovered: self.discovered,
            success,
            elapsed_ms: self.elapsed,
            paths: outcomes,
            chase_lookups: 0,
            chase_contacted: 0,
        };

        if self.policy.mode == LookupMode::FindProviders && !success && self.policy.chase_unreachable {
            // Every dial failed; each unreachable provider earns one lookup.
            let dial = self.net.config().dial_timeout_ms;
            let begin = result.elapsed_ms + dial;
            if begin < self.timeout {
                let mut chase = LookupPolicy::find_node();
                chase.timeout_s = (self.timeout - begin) as f64 / 1000.0;
                let mut slowest = 0;
                let mut seen = HashSet::default();
                for rec in &result.providers {
                    if !seen.insert(rec.provider) || self.net.is_genuine_provider(rec) {
                        continue;
                    }
                    let r = lookup(self.net, self.origin, &rec.provider, &chase);
                    result.chase_lookups += 1;
                    result.chase_contacted += r.contacted;
                    slowest = slowest.max(r.elapsed_ms);
                }
                if result.chase_lookups > 0 {
                    result.elapsed_ms = (begin + slowest).min(self.timeout);
                }
            }
        }
        result
    }
}

fn run(net: &mut Network, origin: NodeIdx, target: &NodeId, policy: &LookupPolicy) -> LookupResult {
    let request = match policy.mode {
        LookupMode::FindNode => Request::FindNode(*target),
        LookupMode::FindProviders => Request::GetProviders(*target),
    };
    let d = policy.disjoint_paths.max(1);
    let mut engine = Engine {
        net,
        origin,
        target: *target,
        policy,
        request,
        paths: (0..d)
            .map(|_| PathRun {
                cands: Vec::with_capacity(256),
                known: HashSet::with_capacity_and_hasher(256, Default::default()),
                ..Default::default()
            })
            .collect(),
        owner: HashMap::default(),
        queue: EventQueue::new(),
        trace: Vec::new(),
        discovered: Vec::new(),
        discovered_set: HashSet::default(),
        timeout: policy.timeout_ms(),
        elapsed: 0,
    };
    engine.search();
    if policy.followup && policy.mode == LookupMode::FindNode {
        engine.followup();
    }
    engine.finish()
}

/// Closest-node search from `origin` toward `target`.
pub fn lookup(net: &mut Network, origin: NodeIdx, target: &NodeId, policy: &LookupPolicy) -> LookupResult {
    let mut p = policy.clone();
    p.mode = LookupMode::FindNode;
    p.disjoint_paths = 1;
    run(net, origin, target, &p)
}

/// Provider search over a single path.
pub fn find_providers(net: &mut Network, origin: NodeIdx, cid: &NodeId, policy: &LookupPolicy) -> LookupResult {
    let mut p = policy.clone();
    p.mode = LookupMode::FindProviders;
    p.followup = false;
    p.disjoint_paths = 1;
    run(net, origin, cid, &p)
}

/// Provider search over `policy.disjoint_paths` paths that never share a
/// queried node.
pub fn find_providers_disjoint(
    net: &mut Network,
    origin: NodeIdx,
    cid: &NodeId,
    policy: &LookupPolicy,
) -> LookupResult {
    let mut p = policy.clone();
    p.mode = LookupMode::FindProviders;
    p.followup = false;
    run(net, origin, cid, &p)
}

/// Dispatches on `policy.disjoint_paths`.
pub fn retrieve(net: &mut Network, origin: NodeIdx, cid: &NodeId, policy: &LookupPolicy) -> LookupResult {
    if policy.disjoint_paths > 1 {
        find_providers_disjoint(net, origin, cid, policy)
    } else {
        find_providers(net, origin, cid, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{build_network, NetworkConfig};

    #[test]
    fn single_node_network() {
        let mut net = build_network(NetworkConfig::with_size(1, 3)).unwrap();
        let t = net.random_target();
        let r = lookup(&mut net, 0, &t, &LookupPolicy::find_node());
        assert_eq!(r.closest_indices(), vec![0]);
        assert_eq!(r.terminated_by, Termination::BetaConvergence);
        assert_eq!(r.contacted, 0);
    }

    #[test]
    fn finds_true_nearest_in_small_net() {
        let mut net = build_network(NetworkConfig::with_size(128, 4)).unwrap();
        let mut hits = 0;
        for i in 0..50 {
            let t = net.random_target();
            let r = lookup(&mut net, (i * 2) as NodeIdx, &t, &LookupPolicy::find_node());
            if r.closest_indices() == net.true_closest(&t, 20, |_| true) {
                hits += 1;
            }
        }
        assert!(hits >= 49, "{hits}/50");
    }

    #[test]
    fn trace_has_no_repeats_and_csv_header() {
        let mut net = build_network(NetworkConfig::with_size(200, 5)).unwrap();
        let t = net.random_target();
        let r = lookup(&mut net, 3, &t, &LookupPolicy::find_node());
        let mut seen = HashSet::default();
        assert!(r.trace.iter().all(|e| seen.insert(e.peer)));
        assert_eq!(seen.len(), r.contacted);
        let mut buf = Vec::new();
        r.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,queried_id,cpl_to_target,n_providers_returned,is_sybil\n"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
    }

    #[test]
    fn policy_validation() {
        assert!(LookupPolicy::find_providers().validate().is_ok());
        assert!(LookupPolicy::find_providers().with_pr_max(5).validate().is_err());
        assert!(LookupPolicy::find_providers().with_paths(0).validate().is_err());
    }
}
