//! Provide strategies: plain k-closest, detection-gated region publication,
//! and distance-radius publication driven by an EWMA estimate of `d_k`.

use std::collections::BTreeSet;
use std::io::Write;

use num_bigint::BigUint;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::detect::{detect, estimate_network_size, DetectionVerdict, DETECTION_THRESHOLD};
use crate::error::DetectError;
use crate::ident::{cpl, random_id_at_cpl, Cpl, Distance, NodeId};
use crate::lookup::{lookup, LookupPolicy, LookupResult};
use crate::node::{ProviderRecord, Reply, Request};
use crate::simnet::{Network, NodeIdx, Provided};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishStrategy {
    Standard,
    RegionBased,
    SrDhtStore,
    /// Radius rounded out to the enclosing prefix zone of `d_k`.
    SrDhtStoreZone,
}

impl PublishStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            PublishStrategy::Standard => "standard",
            PublishStrategy::RegionBased => "region_based",
            PublishStrategy::SrDhtStore => "sr_dht_store",
            PublishStrategy::SrDhtStoreZone => "sr_dht_store_zone",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub min_cpl: u16,
}

impl RegionSpec {
    /// `ceil(log2(n_hat / k))`, floored at zero.
    pub fn for_size(n_hat: f64, k: usize) -> Self {
        let v = (n_hat / k as f64).log2().ceil();
        RegionSpec {
            min_cpl: if v.is_finite() && v > 0.0 { v as u16 } else { 0 },
        }
    }

    pub fn contains(&self, node: &NodeId, target: &NodeId) -> bool {
        cpl(node, target).get() >= self.min_cpl
    }
}

/// Scale of the smoothing factor's rational representation.
const ALPHA_SCALE: u64 = 1_000_000_000;

/// EWMA of the distance enclosing a key's k closest nodes, kept as an exact
/// integer. The smoothing factor is stored as a rational over 10^9.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DkEstimator {
    s_t: BigUint,
    alpha_num: u64,
    pub q_dk: usize,
    pub l_dk: usize,
    pub initialized: bool,
    /// Observations folded in since initialisation.
    pub refinements: usize,
}

impl Default for DkEstimator {
    fn default() -> Self {
        DkEstimator::new(0.1, 10, 16)
    }
}

impl DkEstimator {
    pub fn new(alpha_sf: f64, q_dk: usize, l_dk: usize) -> Self {
        assert!((0.0..=1.0).contains(&alpha_sf), "alpha_sf must lie in [0, 1]");
        DkEstimator {
            s_t: BigUint::default(),
            alpha_num: (alpha_sf * ALPHA_SCALE as f64).round() as u64,
            q_dk,
            l_dk,
            initialized: false,
            refinements: 0,
        }
    }

    pub fn alpha_sf(&self) -> f64 {
        self.alpha_num as f64 / ALPHA_SCALE as f64
    }

    pub fn s_t(&self) -> Distance {
        Distance::from_biguint(&self.s_t)
    }

    pub fn s_t_exact(&self) -> &BigUint {
        &self.s_t
    }

    pub fn set(&mut self, s: BigUint) {
        self.s_t = s;
        self.initialized = true;
    }

    /// `s <- y * alpha + s * (1 - alpha)`.
    pub fn refine(&mut self, y: &BigUint) {
        assert!(self.initialized, "refine before initialisation");
        let a = BigUint::from(self.alpha_num);
        let rest = BigUint::from(ALPHA_SCALE - self.alpha_num);
        self.s_t = (y * a + &self.s_t * rest) / BigUint::from(ALPHA_SCALE);
        self.refinements += 1;
    }

    /// `floor(log2(s_t))`.
    pub fn log2(&self) -> Option<u32> {
        self.s_t().log2_floor()
    }

    /// Prefix length of a node sitting exactly at distance `s_t`.
    pub fn zone_cpl(&self) -> u16 {
        match self.log2() {
            Some(l) => (255 - l) as u16,
            None => 256,
        }
    }
}

/// Queries `q_dk` random routing-table peers for the k closest nodes they
/// know to themselves and averages the distance to the k-th. Returns the
/// number of peers contacted.
pub fn dk_initialize(
    net: &mut Network,
    origin: NodeIdx,
    estimator: &mut DkEstimator,
) -> Result<usize, DetectError> {
    let k = net.params().k;
    let peers: Vec<NodeIdx> = net.node(origin).table.peers().collect();
    let live: Vec<NodeIdx> = peers.into_iter().filter(|p| net.is_online(*p)).collect();
    if live.len() < estimator.q_dk {
        return Err(DetectError::InsufficientPeers {
            needed: estimator.q_dk,
            found: live.len(),
        });
    }
    let picks: Vec<NodeIdx> = sample(net.rng(), live.len(), estimator.q_dk)
        .into_iter()
        .map(|i| live[i])
        .collect();
    let mut sum = BigUint::default();
    let mut used = 0u32;
    let mut contacted = 0;
    for p in picks {
        let pid = net.id(p);
        contacted += 1;
        if let Ok((Reply::Peers(list), _)) = net.exchange(origin, p, &Request::FindNode(pid)) {
            if list.len() >= k {
                sum += net.id(list[k - 1]).distance(&pid).to_biguint();
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(DetectError::InsufficientPeers {
            needed: estimator.q_dk,
            found: 0,
        });
    }
    estimator.set(sum / BigUint::from(used));
    Ok(contacted)
}

pub fn dk_refine(estimator: &mut DkEstimator, y_t: &Distance) {
    estimator.refine(&y_t.to_biguint());
}

/// Folds the k-th distances of routing-refresh lookups into the estimate.
/// Returns the lookups' contacted total.
pub fn dk_refine_with_refresh(net: &mut Network, origin: NodeIdx, estimator: &mut DkEstimator) -> usize {
    let k = net.params().k;
    let results = crate::node::refresh(net, origin);
    let mut contacted = 0;
    for r in results.iter().take(estimator.l_dk) {
        contacted += r.contacted;
        if let Some(d) = r.kth_distance(k) {
            dk_refine(estimator, &d);
        }
    }
    contacted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvideReport {
    pub strategy: PublishStrategy,
    pub cid: NodeId,
    pub records_sent: usize,
    pub contacted_total: usize,
    pub overshoot: i64,
    pub recipients: Vec<NodeIdx>,
    pub estimation_contacted: usize,
    pub lookup_contacted: usize,
    pub crawl_contacted: usize,
    pub verdict: Option<DetectionVerdict>,
    pub n_hat: Option<f64>,
}

impl ProvideReport {
    fn new(strategy: PublishStrategy, cid: NodeId, k: usize, recipients: Vec<NodeIdx>) -> Self {
        ProvideReport {
            strategy,
            cid,
            records_sent: recipients.len(),
            contacted_total: 0,
            overshoot: recipients.len() as i64 - k as i64,
            recipients,
            estimation_contacted: 0,
            lookup_contacted: 0,
            crawl_contacted: 0,
            verdict: None,
            n_hat: None,
        }
    }
}

/// Delivers the provider record of `origin` for `cid` to each recipient and
/// returns those that acknowledged. The origin stores its own copy directly.
fn deliver(net: &mut Network, origin: NodeIdx, cid: &NodeId, recipients: &[NodeIdx]) -> Vec<NodeIdx> {
    let record = ProviderRecord {
        cid: *cid,
        provider: net.id(origin),
        endpoint: net.endpoint(origin),
        stored_at: net.now(),
    };
    let mut acked = Vec::with_capacity(recipients.len());
    for &r in recipients {
        if r == origin {
            net.handle_add_provider(origin, record.clone());
            acked.push(r);
        } else if net
            .exchange(origin, r, &Request::AddProvider(record.clone()))
            .is_ok()
        {
            acked.push(r);
        }
    }
    acked
}

fn mark_provided(net: &mut Network, origin: NodeIdx, cid: &NodeId, strategy: PublishStrategy) {
    let now = net.now();
    let node = net.node_mut(origin);
    match node.provided.iter_mut().find(|p| p.cid == *cid) {
        Some(p) => {
            p.strategy = strategy;
            p.last_published = now;
        }
        None => node.provided.push(Provided {
            cid: *cid,
            strategy,
            last_published: now,
        }),
    }
}

pub fn provide_standard(net: &mut Network, origin: NodeIdx, cid: &NodeId) -> ProvideReport {
    let k = net.params().k;
    let found = lookup(net, origin, cid, &LookupPolicy::find_node());
    let targets = found.closest_indices();
    let acked = deliver(net, origin, cid, &targets);
    mark_provided(net, origin, cid, PublishStrategy::Standard);
    let mut report = ProvideReport::new(PublishStrategy::Standard, *cid, k, acked);
    report.lookup_contacted = found.contacted;
    report.contacted_total = found.contacted;
    report
}

/// Detection state kept by a publisher between publications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDetector {
    /// Cached size estimate; computed on first use.
    pub n_hat: Option<f64>,
    pub samples: usize,
    pub threshold: f64,
    /// Crawl regardless of the verdict.
    pub force: bool,
}

impl Default for RegionDetector {
    fn default() -> Self {
        RegionDetector {
            n_hat: None,
            samples: 10,
            threshold: DETECTION_THRESHOLD,
            force: false,
        }
    }
}

impl RegionDetector {
    pub fn forced() -> Self {
        RegionDetector {
            force: true,
            ..Self::default()
        }
    }

    pub fn with_estimate(n_hat: f64) -> Self {
        RegionDetector {
            n_hat: Some(n_hat),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crawl {
    /// Every node found sharing at least `min_cpl` bits with the target.
    pub region: Vec<NodeIdx>,
    pub lookups: usize,
    pub contacted: usize,
}

/// Enumerates the nodes sharing at least `min_cpl` bits with `target`.
///
/// The k closest from `initial` already contain every node deeper than the
/// prefix length `c` of their k-th member. Each shallower layer `c' in
/// [min_cpl, c]` is the subtree branching off the target's path at depth
/// `c'`; it is swept with a lookup toward a random id inside it, and any
/// subtree whose sweep comes back entirely inside it is split in two and
/// swept again.
pub fn region_crawl(
    net: &mut Network,
    origin: NodeIdx,
    target: &NodeId,
    min_cpl: u16,
    initial: &LookupResult,
) -> Crawl {
    let k = net.params().k;
    let mut region: BTreeSet<(Distance, NodeIdx)> = BTreeSet::new();
    let mut crawl = Crawl {
        region: Vec::new(),
        lookups: 0,
        contacted: 0,
    };
    let absorb = |r: &LookupResult, region: &mut BTreeSet<(Distance, NodeIdx)>| {
        for e in r.closest.iter().chain(r.discovered.iter().map(|d| &d.endpoint)) {
            if cpl(&e.node_id, target).get() >= min_cpl {
                if let Some(i) = e.index() {
                    region.insert((e.node_id.distance(target), i));
                }
            }
        }
    };
    absorb(initial, &mut region);
    let deepest = match initial.closest.get(k.saturating_sub(1)) {
        Some(e) if initial.closest.len() >= k => cpl(&e.node_id, target).get(),
        // Fewer than k nodes exist at all; the lookup saw everything.
        _ => 0,
    };
    if initial.closest.len() >= k && deepest >= min_cpl {
        let policy = LookupPolicy::find_node();
        // (prefix owner, prefix length) pairs: subtree of ids sharing
        // `len` bits with `owner`.
        let mut stack: Vec<(NodeId, u16)> = Vec::new();
        for c in (min_cpl..=deepest.min(255)).rev() {
            let sibling = target.with_bit_flipped(c as u32);
            stack.push((sibling, c + 1));
        }
        while let Some((owner, len)) = stack.pop() {
            let probe = if len >= 256 {
                owner
            } else {
                random_id_at_cpl(&owner, Cpl::new(len).expect("len < 256"), net.rng())
            };
            let r = lookup(net, origin, &probe, &policy);
            crawl.lookups += 1;
            crawl.contacted += r.contacted;
            absorb(&r, &mut region);
            let inside = r
                .closest
                .iter()
                .filter(|e| cpl(&e.node_id, &owner).get() >= len)
                .count();
            if inside >= k && len < 256 {
                stack.push((owner, len + 1));
                stack.push((owner.with_bit_flipped(len as u32), len + 1));
            }
        }
    }
    crawl.region = region.into_iter().map(|(_, i)| i).collect();
    crawl
}

/// Gated publication: a plain lookup whose k closest are tested against the
/// model; a flagged (or forced) key is published to its whole region.
pub fn provide_region_based(
    net: &mut Network,
    origin: NodeIdx,
    cid: &NodeId,
    detector: &mut RegionDetector,
) -> Result<ProvideReport, DetectError> {
    let k = net.params().k;
    let mut estimation = 0;
    let n_hat = match detector.n_hat {
        Some(n) => n,
        None => {
            let est = estimate_network_size(net, origin, detector.samples)?;
            estimation = est.contacted;
            detector.n_hat = Some(est.n_hat);
            est.n_hat
        }
    };
    let found = lookup(net, origin, cid, &LookupPolicy::find_node());
    let closest = found.closest_indices();
    let ids: Vec<NodeId> = found.closest_ids();
    let mut verdict = if ids.len() == k {
        detect(&ids, cid, n_hat, k)?
    } else {
        DetectionVerdict {
            d_kl: 0.0,
            threshold: detector.threshold,
            is_attack: false,
        }
    };
    verdict.threshold = detector.threshold;
    verdict.is_attack = verdict.d_kl > detector.threshold;

    let mut crawl_contacted = 0;
    let recipients = if verdict.is_attack || detector.force {
        let spec = RegionSpec::for_size(n_hat, k);
        let crawl = region_crawl(net, origin, cid, spec.min_cpl, &found);
        crawl_contacted = crawl.contacted;
        let mut all: BTreeSet<NodeIdx> = closest.iter().copied().collect();
        all.extend(crawl.region);
        let mut v: Vec<NodeIdx> = all.into_iter().collect();
        v.sort_by_key(|i| net.id(*i).distance(cid));
        v
    } else {
        closest
    };
    let acked = deliver(net, origin, cid, &recipients);
    mark_provided(net, origin, cid, PublishStrategy::RegionBased);
    let mut report = ProvideReport::new(PublishStrategy::RegionBased, *cid, k, acked);
    report.estimation_contacted = estimation;
    report.lookup_contacted = found.contacted;
    report.crawl_contacted = crawl_contacted;
    report.contacted_total = estimation + found.contacted + crawl_contacted;
    report.verdict = Some(verdict);
    report.n_hat = Some(n_hat);
    Ok(report)
}

/// Publication to every node found within the estimated radius during the
/// lookup, topped up from the lookup transcript to k recipients. An
/// uninitialised estimator is initialised first and its cost counted.
pub fn provide_sr_dht_store(
    net: &mut Network,
    origin: NodeIdx,
    cid: &NodeId,
    estimator: &mut DkEstimator,
    zone: bool,
) -> Result<ProvideReport, DetectError> {
    let k = net.params().k;
    let estimation = if estimator.initialized {
        0
    } else {
        dk_initialize(net, origin, estimator)?
    };
    let radius = estimator.s_t();
    let zone_cpl = estimator.zone_cpl();
    let within = |id: &NodeId| {
        if zone {
            cpl(id, cid).get() >= zone_cpl
        } else {
            id.distance(cid) < radius
        }
    };
    let found = lookup(net, origin, cid, &LookupPolicy::find_node());

    let mut chosen: Vec<NodeIdx> = Vec::new();
    let mut taken: BTreeSet<NodeIdx> = BTreeSet::new();
    // Sends happen as peers are discovered, so discovery order is kept.
    for d in &found.discovered {
        if let Some(i) = d.endpoint.index() {
            if i != origin && within(&d.endpoint.node_id) && taken.insert(i) {
                chosen.push(i);
            }
        }
    }
    let mut acked = deliver(net, origin, cid, &chosen);
    let mut extra_lookup = 0;
    if acked.len() < k {
        let mut pool: Vec<(Distance, NodeIdx)> = found
            .discovered
            .iter()
            .filter_map(|d| d.endpoint.index().map(|i| (d.distance, i)))
            .filter(|(_, i)| *i != origin && !taken.contains(i))
            .collect();
        if pool.len() + acked.len() < k {
            let more = lookup(net, origin, cid, &LookupPolicy::find_node());
            extra_lookup = more.contacted;
            for d in &more.discovered {
                if let Some(i) = d.endpoint.index() {
                    if i != origin && !taken.contains(&i) {
                        pool.push((d.distance, i));
                    }
                }
            }
        }
        pool.sort_unstable();
        pool.dedup();
        for (_, i) in pool {
            if acked.len() >= k {
                break;
            }
            taken.insert(i);
            acked.extend(deliver(net, origin, cid, &[i]));
        }
    }
    if let Some(y) = found.kth_distance(k) {
        dk_refine(estimator, &y);
    }
    let strategy = if zone {
        PublishStrategy::SrDhtStoreZone
    } else {
        PublishStrategy::SrDhtStore
    };
    mark_provided(net, origin, cid, strategy);
    let mut report = ProvideReport::new(strategy, *cid, k, acked);
    let extra = report.overshoot.max(0) as usize;
    report.estimation_contacted = estimation;
    report.lookup_contacted = found.contacted + extra_lookup;
    report.contacted_total = estimation + report.lookup_contacted + extra;
    Ok(report)
}

/// Per-publisher state kept across (re)publications.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PublisherState {
    pub detector: RegionDetector,
    pub estimator: DkEstimator,
}

/// Publishes with `strategy`, reusing and updating the state kept on the
/// origin node.
pub fn provide(
    net: &mut Network,
    origin: NodeIdx,
    cid: &NodeId,
    strategy: PublishStrategy,
) -> Result<ProvideReport, DetectError> {
    let mut state = net.node_mut(origin).publisher.take().unwrap_or_default();
    let out = match strategy {
        PublishStrategy::Standard => Ok(provide_standard(net, origin, cid)),
        PublishStrategy::RegionBased => provide_region_based(net, origin, cid, &mut state.detector),
        PublishStrategy::SrDhtStore => provide_sr_dht_store(net, origin, cid, &mut state.estimator, false),
        PublishStrategy::SrDhtStoreZone => provide_sr_dht_store(net, origin, cid, &mut state.estimator, true),
    };
    net.node_mut(origin).publisher = Some(state);
    out
}

/// Republication hook used by the network clock.
pub fn republish(net: &mut Network, origin: NodeIdx, cid: NodeId, strategy: PublishStrategy) {
    // A failed estimate leaves the previous records to expire.
    let _ = provide(net, origin, &cid, strategy);
}

pub fn write_reports_csv<W: Write>(reports: &[ProvideReport], seed: u64, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "records_sent", "contacted_total", "overshoot", "seed"])?;
    for r in reports {
        w.write_record([
            r.strategy.as_str().to_string(),
            r.records_sent.to_string(),
            r.contacted_total.to_string(),
            r.overshoot.to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
