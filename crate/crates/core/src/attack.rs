//! Adversary planning: where to put Sybil identities in a key's k closest so
//! the prefix-length profile stays under the detector's radar.
//!
//! The search walks prefix lengths from the highest useful one down to zero.
//! At each level it tries every Sybil count that fits, evicting the farthest
//! members of the k closest to make room, and abandons a level as soon as
//! the divergence margin is exceeded. Results are memoised on
//! `(level, histogram)`.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap as HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{divergence, CplHistogram, ModelDistribution};
use crate::error::AttackError;
use crate::ident::{cpl, forge_id, Cpl, Distance, NodeId};
use crate::node::{bootstrap, Node, SybilBehavior, SybilMode};
use crate::simnet::{Network, NodeIdx};

/// Divergence the attacker allows itself, below the detector's threshold to
/// absorb estimation error.
pub const ATTACK_MARGIN: f64 = 0.85;

const BINS: usize = 257;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeCostModel {
    /// Seconds per key-pair generation.
    pub t_ed25519: f64,
}

impl Default for ForgeCostModel {
    fn default() -> Self {
        ForgeCostModel { t_ed25519: 1.35e-6 }
    }
}

impl ForgeCostModel {
    /// Expected seconds to brute-force one identifier at exactly `cpl`.
    pub fn cost(&self, cpl: u16) -> f64 {
        self.t_ed25519 * 2f64.powi(cpl as i32 + 1)
    }

    pub fn plan_cost(&self, plan: &AttackPlan) -> f64 {
        plan.sybils_per_cpl
            .iter()
            .map(|(c, n)| self.cost(*c) * *n as f64)
            .sum()
    }
}

pub fn forge_cost(cpl: u16) -> f64 {
    ForgeCostModel::default().cost(cpl)
}

/// Adds `n_sybil` entries at `at_cpl` and evicts the `n_sybil` entries with
/// the lowest prefix length.
pub fn update_k_closest_with_sybils(
    hist: &CplHistogram,
    n_sybil: usize,
    at_cpl: u16,
) -> Result<CplHistogram, AttackError> {
    let k = hist.total();
    if n_sybil + hist.count(at_cpl) > k {
        return Err(AttackError::BadArgument(format!(
            "{n_sybil} sybils do not fit next to {} nodes at cpl {at_cpl}",
            hist.count(at_cpl)
        )));
    }
    let mut dense = Dense::from_hist(hist);
    if !dense.insert(n_sybil, at_cpl as usize) {
        return Err(AttackError::Infeasible(at_cpl));
    }
    Ok(dense.to_hist())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Dense([u8; BINS]);

impl Dense {
    fn from_hist(h: &CplHistogram) -> Self {
        let mut d = [0u8; BINS];
        for (c, n) in h.iter() {
            d[c as usize] = u8::try_from(n).expect("histogram counts fit in u8");
        }
        Dense(d)
    }

    fn to_hist(self) -> CplHistogram {
        CplHistogram::from_counts(
            self.0
                .iter()
                .enumerate()
                .filter(|(_, n)| **n > 0)
                .map(|(c, n)| (c as u16, *n as usize)),
        )
    }

    fn insert(&mut self, n: usize, at: usize) -> bool {
        if n == 0 {
            return true;
        }
        let mut rest = n;
        let mut next = self.0;
        for c in 0..BINS {
            if rest == 0 {
                break;
            }
            if next[c] > 0 {
                if c >= at {
                    return false;
                }
                let t = rest.min(next[c] as usize);
                next[c] -= t as u8;
                rest -= t;
            }
        }
        if rest > 0 {
            return false;
        }
        next[at] += n as u8;
        self.0 = next;
        true
    }

    fn lowest(&self) -> Option<usize> {
        self.0.iter().position(|n| *n > 0)
    }

    fn kl(&self, p: &ModelDistribution, total: f64) -> f64 {
        let mut d = 0.0;
        for (c, n) in self.0.iter().enumerate() {
            if *n > 0 {
                let q = *n as f64 / total;
                let px = p.prob(c as u16);
                if px <= 0.0 {
                    return f64::INFINITY;
                }
                d += q * (q / px).ln();
            }
        }
        d.max(0.0)
    }

    /// Sorted multiset of prefix lengths; the memo key.
    fn key(&self) -> Vec<u8> {
        let mut v = Vec::new();
        for (c, n) in self.0.iter().enumerate() {
            for _ in 0..*n {
                v.push(c.min(255) as u8);
            }
        }
        v
    }
}

/// The highest prefix length at which a single Sybil keeps the divergence
/// within `margin`, or `None` when no level admits one.
pub fn start_cpl(hist: &CplHistogram, p: &ModelDistribution) -> Option<Cpl> {
    start_cpl_with(hist, p, ATTACK_MARGIN)
}

pub fn start_cpl_with(hist: &CplHistogram, p: &ModelDistribution, margin: f64) -> Option<Cpl> {
    let total = hist.total();
    if total == 0 {
        return None;
    }
    let base = Dense::from_hist(hist);
    for c in (0..256usize).rev() {
        if base.0[c] as usize >= total {
            continue;
        }
        let mut d = base;
        if d.insert(1, c) && d.kl(p, total as f64) <= margin {
            return Some(Cpl::new(c as u16).expect("c < 256"));
        }
    }
    None
}

/// How the search discards Sybil counts at a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pruning {
    /// Skip a count only when no completion can end within the margin.
    /// Bins at or above the current level are final, so lumping the rest
    /// into one bin gives a lower bound on the final divergence.
    Exact,
    /// Stop raising the count at the first profile over the margin and
    /// start at [`start_cpl`]. Faster, but can miss the optimum because
    /// the divergence is not monotone in the count.
    FirstOverMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub margin: f64,
    pub pruning: Pruning,
    /// Visited-state cap; the best plan found so far is returned when hit.
    pub budget: usize,
    /// Swap the honest members at the lowest prefix length of the final
    /// profile for closer Sybils, which leaves the profile unchanged.
    pub refine_within_cpl: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            margin: ATTACK_MARGIN,
            pruning: Pruning::Exact,
            budget: 1_000_000,
            refine_within_cpl: true,
        }
    }
}

/// Histogram-level outcome of the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub initial: CplHistogram,
    pub result: CplHistogram,
    /// Sybils added per level by the search proper.
    pub added: BTreeMap<u16, usize>,
    /// Honest nodes at the lowest level replaced by closer Sybils.
    pub refined: usize,
    pub score: u64,
    pub d_kl: f64,
    pub start_cpl: Option<u16>,
    pub states: usize,
    pub budget_exhausted: bool,
}

impl Placement {
    pub fn added_total(&self) -> usize {
        self.added.values().sum()
    }

    pub fn sybil_total(&self) -> usize {
        self.added_total() + self.refined
    }

    /// Sybils per level including the refinement swaps.
    pub fn sybils_per_cpl(&self) -> BTreeMap<u16, usize> {
        let mut m = self.added.clone();
        if self.refined > 0 {
            let low = self.result.min_cpl().expect("non-empty");
            *m.entry(low).or_insert(0) += self.refined;
        }
        m
    }
}

#[derive(Clone)]
struct Leaf {
    score: u64,
    d_kl: f64,
    hist: Dense,
}

fn better(a: &Leaf, b: &Leaf) -> bool {
    match a.score.cmp(&b.score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => match a.d_kl.total_cmp(&b.d_kl) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => a.hist.key() < b.hist.key(),
        },
    }
}

/// Score of a final profile: each Sybil counts its prefix length.
pub fn placement_score(initial: &CplHistogram, result: &CplHistogram) -> u64 {
    result
        .iter()
        .map(|(c, n)| n.saturating_sub(initial.count(c)) as u64 * c as u64)
        .sum()
}

struct Search<'a> {
    p: &'a ModelDistribution,
    initial: Dense,
    total: f64,
    k: usize,
    margin: f64,
    pruning: Pruning,
    /// `below[c]` is the model mass under prefix length `c`.
    below: Vec<f64>,
    budget: usize,
    states: usize,
    exhausted: bool,
    memo: HashMap<(u16, Vec<u8>), Option<Leaf>>,
    incumbent: Option<Leaf>,
}

impl Search<'_> {
    fn score(&self, h: &Dense) -> u64 {
        let mut s = 0;
        for c in 0..BINS {
            s += h.0[c].saturating_sub(self.initial.0[c]) as u64 * c as u64;
        }
        s
    }

    /// Largest score any completion of `h` below `level` can reach: only
    /// entries under `level` can be evicted, each for at most `level`.
    fn bound(&self, h: &Dense, level: usize) -> u64 {
        let below: u64 = h.0[..level].iter().map(|n| *n as u64).sum();
        self.score(h) + below * level as u64
    }

    /// Lower bound on the final divergence of any completion of `h` once
    /// `level` has been processed.
    fn kl_floor(&self, h: &Dense, level: usize) -> f64 {
        let mut d = 0.0;
        let mut rest = 0.0;
        for (c, n) in h.0.iter().enumerate() {
            if *n == 0 {
                continue;
            }
            let q = *n as f64 / self.total;
            if c < level {
                rest += q;
                continue;
            }
            let px = self.p.prob(c as u16);
            if px <= 0.0 {
                return f64::INFINITY;
            }
            d += q * (q / px).ln();
        }
        if rest > 0.0 {
            let pr = self.below[level];
            if pr <= 0.0 {
                return f64::INFINITY;
            }
            d += rest * (rest / pr).ln();
        }
        d
    }

    /// Highest level at which some feasible Sybil count can still end within
    /// the margin; no plan places a Sybil above it.
    fn top_level(&self) -> Option<usize> {
        let k = self.k;
        (0..256usize).rev().find(|&c| {
            let present = self.initial.0[c] as usize;
            (1..=k.saturating_sub(present)).any(|s| {
                let mut next = self.initial;
                next.insert(s, c) && self.kl_floor(&next, c) <= self.margin
            })
        })
    }

    fn visit(&mut self, h: Dense, level: usize) -> Option<Leaf> {
        let key = (level as u16, h.key());
        if let Some(hit) = self.memo.get(&key) {
            return hit.clone();
        }
        if self.incumbent.as_ref().is_some_and(|b| self.bound(&h, level) < b.score) {
            return None;
        }
        if self.states >= self.budget {
            self.exhausted = true;
            return None;
        }
        self.states += 1;
        let present = h.0[level] as usize;
        let mut options = Vec::new();
        for i in present..=self.k {
            let sybils = i - present;
            let mut next = h;
            if !next.insert(sybils, level) {
                break;
            }
            let d_kl = next.kl(self.p, self.total);
            match self.pruning {
                Pruning::Exact => {
                    if self.kl_floor(&next, level) > self.margin {
                        continue;
                    }
                }
                Pruning::FirstOverMargin => {
                    // The unchanged profile is always carried down so lower
                    // levels may still repair it.
                    if d_kl > self.margin && sybils > 0 {
                        break;
                    }
                }
            }
            options.push((next, d_kl));
        }
        let mut best: Option<Leaf> = None;
        let mut complete = true;
        for (next, d_kl) in options.into_iter().rev() {
            let cand = if level == 0 {
                (d_kl <= self.margin).then(|| Leaf {
                    score: self.score(&next),
                    d_kl,
                    hist: next,
                })
            } else {
                let before = self.exhausted;
                let r = self.visit(next, level - 1);
                complete &= !self.exhausted || before;
                r
            };
            if let Some(c) = cand {
                if best.as_ref().is_none_or(|b| better(&c, b)) {
                    best = Some(c.clone());
                }
                if self.incumbent.as_ref().is_none_or(|b| better(&c, b)) {
                    self.incumbent = Some(c);
                }
            }
        }
        // Subtrees cut by the bound hold nothing that beats the incumbent,
        // which only improves, so a cached partial answer stays sound.
        if complete {
            self.memo.insert(key, best.clone());
        }
        best
    }
}

/// Runs the search on a census histogram.
pub fn optimize_histogram(
    hist: &CplHistogram,
    p: &ModelDistribution,
    cfg: &OptimizerConfig,
) -> Placement {
    let k = hist.total();
    let initial = Dense::from_hist(hist);
    let start = start_cpl_with(hist, p, cfg.margin);
    let mut placement = Placement {
        initial: hist.clone(),
        result: hist.clone(),
        added: BTreeMap::new(),
        refined: 0,
        score: 0,
        d_kl: divergence(hist, p),
        start_cpl: start.map(Cpl::get),
        states: 0,
        budget_exhausted: false,
    };
    if k == 0 {
        return placement;
    }
    let mut below = vec![0.0; BINS];
    for c in 1..BINS {
        below[c] = below[c - 1] + p.prob(c as u16 - 1);
    }
    let mut search = Search {
        p,
        initial,
        total: k as f64,
        k,
        margin: cfg.margin,
        pruning: cfg.pruning,
        below,
        budget: cfg.budget,
        states: 0,
        exhausted: false,
        memo: HashMap::default(),
        incumbent: None,
    };
    let top = match cfg.pruning {
        Pruning::Exact => search.top_level().unwrap_or(0),
        Pruning::FirstOverMargin => match start {
            Some(c) => c.index(),
            None => return placement,
        },
    };
    let best = search.visit(initial, top);
    placement.states = search.states;
    placement.budget_exhausted = search.exhausted;
    let Some(best) = best else {
        return placement;
    };
    for c in 0..BINS {
        let extra = best.hist.0[c].saturating_sub(initial.0[c]);
        if extra > 0 {
            placement.added.insert(c as u16, extra as usize);
        }
    }
    placement.result = best.hist.to_hist();
    placement.score = best.score;
    placement.d_kl = best.d_kl;
    if cfg.refine_within_cpl {
        let low = best.hist.lowest().expect("k > 0");
        let added_low = placement.added.get(&(low as u16)).copied().unwrap_or(0);
        placement.refined = best.hist.0[low] as usize - added_low;
    }
    placement
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub target: NodeId,
    pub sybils_per_cpl: BTreeMap<u16, usize>,
    pub forged_ids: Vec<NodeId>,
    pub resulting_dkl: f64,
    pub score: u64,
    pub displaced_honest: Vec<NodeId>,
    pub refined: usize,
    pub start_cpl: Option<u16>,
    pub states: usize,
}

impl AttackPlan {
    pub fn empty(target: NodeId) -> Self {
        AttackPlan {
            target,
            sybils_per_cpl: BTreeMap::new(),
            forged_ids: Vec::new(),
            resulting_dkl: 0.0,
            score: 0,
            displaced_honest: Vec::new(),
            refined: 0,
            start_cpl: None,
            states: 0,
        }
    }

    pub fn sybil_count(&self) -> usize {
        self.forged_ids.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialise")
    }
}

/// Plans an attack on `target` given the honest k closest (any order) and
/// the attacker's model, forging identifiers that realise the placement.
///
/// A Sybil at prefix length `c` is forged strictly closer to the target than
/// every census member at `c`, so it outranks them in the k closest.
pub fn optimize_sybil_placement<R: Rng + ?Sized>(
    census: &[NodeId],
    target: &NodeId,
    p: &ModelDistribution,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> AttackPlan {
    let hist = CplHistogram::of(census, target);
    let placement = optimize_histogram(&hist, p, cfg);
    realize(census, target, &placement, rng)
}

pub fn realize<R: Rng + ?Sized>(
    census: &[NodeId],
    target: &NodeId,
    placement: &Placement,
    rng: &mut R,
) -> AttackPlan {
    let mut honest: Vec<(Distance, NodeId)> = census.iter().map(|id| (id.distance(target), *id)).collect();
    honest.sort_unstable();
    let per_cpl = placement.sybils_per_cpl();
    let total: usize = per_cpl.values().sum();
    let mut forged = Vec::with_capacity(total);
    for (&c, &n) in &per_cpl {
        let bound = honest
            .iter()
            .find(|(_, id)| cpl(id, target).get() == c)
            .map(|(d, _)| *d);
        let mut made: Vec<NodeId> = Vec::with_capacity(n);
        while made.len() < n {
            let id = forge_id(target, Cpl::new(c).expect("c < 256"), bound.as_ref(), rng)
                .expect("a census member at c leaves room below it");
            if !census.contains(&id) && !made.contains(&id) {
                made.push(id);
            }
        }
        forged.extend(made);
    }
    let kept = census.len().saturating_sub(total);
    AttackPlan {
        target: *target,
        sybils_per_cpl: per_cpl,
        forged_ids: forged,
        resulting_dkl: placement.d_kl,
        score: placement.score,
        displaced_honest: honest[kept..].iter().map(|(_, id)| *id).collect(),
        refined: placement.refined,
        start_cpl: placement.start_cpl,
        states: placement.states,
    }
}

/// Plans against the live network: census from the honest population, model
/// from the attacker's size estimate.
pub fn plan_attack(
    net: &mut Network,
    target: &NodeId,
    n_hat: f64,
    cfg: &OptimizerConfig,
) -> Result<AttackPlan, crate::error::DetectError> {
    let k = net.params().k;
    let census: Vec<NodeId> = net
        .true_closest(target, k, |i| !net.is_sybil(i))
        .into_iter()
        .map(|i| net.id(i))
        .collect();
    let p = crate::detect::model_distribution(n_hat, k)?;
    Ok(optimize_sybil_placement(&census, target, &p, cfg, net.rng()))
}

/// Adds the plan's Sybils to the network. They know one another, bootstrap
/// through the seed nodes and adopt `mode` toward `target`.
pub fn deploy(net: &mut Network, plan: &AttackPlan, mode: SybilMode, target: &NodeId) -> Vec<NodeIdx> {
    let mut added = Vec::new();
    for id in &plan.forged_ids {
        if net.index_of(id).is_some() {
            continue;
        }
        let idx = net.add_node(*id, Node::sybil(SybilBehavior::new(mode, *target)));
        added.push(idx);
    }
    net.sybil_groups
        .entry(*target)
        .or_default()
        .extend(added.iter().copied());
    let group = net.sybil_group(target).to_vec();
    for &a in &added {
        for &b in &group {
            net.observe_peer(a, b);
            net.observe_peer(b, a);
        }
    }
    let seeds = net.config().seed_nodes.min(net.honest_count());
    for &a in &added {
        for s in 0..seeds as NodeIdx {
            net.observe_peer(a, s);
        }
        bootstrap(net, a);
    }
    added
}
