//! Scenario harness: build a network, optionally attack some content keys,
//! publish them, then probe retrieval on a virtual-time schedule.
//!
//! A ladder runs several publication/lookup combinations against one built
//! and attacked network per seed, so every rung faces the same Sybils.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{deploy, optimize_histogram, plan_attack, OptimizerConfig, Placement};
use crate::detect::{divergence, estimate_network_size, model_distribution, CplHistogram};
use crate::error::{ConfigError, ExperimentError};
use crate::ident::NodeId;
use crate::lookup::{lookup, retrieve, LookupPolicy};
use crate::node::SybilMode;
use crate::publish::{
    dk_refine_with_refresh, provide, provide_region_based, provide_sr_dht_store, DkEstimator,
    PublishStrategy, RegionDetector,
};
use crate::simnet::{build_network, Network, NetworkConfig, NodeIdx, MINUTE_MS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub mode: SybilMode,
    pub optimizer: OptimizerConfig,
    /// Lookups behind the attacker's size estimate.
    pub estimate_samples: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            mode: SybilMode::Active,
            optimizer: OptimizerConfig::default(),
            estimate_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSchedule {
    pub interval_min: u64,
    /// Hard cap on probe rounds.
    pub max_probes: usize,
    /// Rounds per sliding window for the convergence check; 0 disables it.
    pub window: usize,
    /// Stop once two consecutive windows differ by less than this rate.
    pub tolerance: f64,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        ProbeSchedule {
            interval_min: 30,
            max_probes: 20,
            window: 0,
            tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub network: NetworkConfig,
    pub attack: Option<AttackSpec>,
    pub publish_strategy: PublishStrategy,
    pub lookup_policy: LookupPolicy,
    pub probes: ProbeSchedule,
    /// Content keys published (and attacked) per seed.
    pub targets: usize,
    /// Routing refresh passes between deployment and publication.
    pub warmup_rounds: usize,
    pub seeds: Vec<u64>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "baseline".into(),
            network: NetworkConfig::default(),
            attack: None,
            publish_strategy: PublishStrategy::Standard,
            lookup_policy: LookupPolicy::find_providers(),
            probes: ProbeSchedule::default(),
            targets: 1,
            warmup_rounds: 1,
            seeds: vec![1],
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.lookup_policy.validate()?;
        if self.targets == 0 {
            return Err(ConfigError::Invalid("a scenario needs at least one target".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("a scenario needs at least one seed".into()));
        }
        if self.probes.interval_min == 0 || self.probes.max_probes == 0 {
            return Err(ConfigError::Invalid("probe interval and count must be positive".into()));
        }
        if self.network.n_honest < 2 {
            return Err(ConfigError::Invalid("probing needs a requester besides the publisher".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let sc: Scenario = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn rung(&self) -> Rung {
        Rung {
            label: self.name.clone(),
            publish_strategy: self.publish_strategy,
            lookup_policy: self.lookup_policy.clone(),
        }
    }
}

/// One publication/lookup combination of a ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub label: String,
    pub publish_strategy: PublishStrategy,
    pub lookup_policy: LookupPolicy,
}

impl Rung {
    pub fn new(label: &str, publish_strategy: PublishStrategy, lookup_policy: LookupPolicy) -> Self {
        Rung {
            label: label.into(),
            publish_strategy,
            lookup_policy,
        }
    }
}

/// The mitigation ladder evaluated against the optimised active attack.
pub fn defense_ladder() -> Vec<Rung> {
    let base = LookupPolicy::find_providers();
    vec![
        Rung::new("region_based", PublishStrategy::RegionBased, base.clone()),
        Rung::new("sr_dht_store", PublishStrategy::SrDhtStore, base.clone()),
        Rung::new("sr_dht_store_pr50", PublishStrategy::SrDhtStore, base.clone().with_pr_max(50)),
        Rung::new("sr_dht_store_pr200", PublishStrategy::SrDhtStore, base.clone().with_pr_max(200)),
        Rung::new("sr_dht_store_disjoint", PublishStrategy::SrDhtStore, base.with_paths(10)),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Retrieved,
    Eclipsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub seed: u64,
    pub target: usize,
    pub probe_time: u64,
    pub outcome: Outcome,
    pub contacted: usize,
    pub records_seen: usize,
    pub terminated_by: String,
}

/// Attack bookkeeping per seed and content key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub seed: u64,
    pub target: usize,
    pub n_hat: f64,
    pub sybils: usize,
    pub deployed: usize,
    pub planned_dkl: f64,
    /// Divergence of the true post-deployment k closest against the model
    /// for the real size.
    pub census_dkl: f64,
    pub score: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub rows: Vec<MetricRow>,
    pub plans: Vec<PlanRow>,
}

impl ScenarioRun {
    pub fn success_rate(&self, label: &str) -> Option<f64> {
        let mine: Vec<_> = self.rows.iter().filter(|r| r.scenario == label).collect();
        if mine.is_empty() {
            return None;
        }
        let ok = mine.iter().filter(|r| r.outcome == Outcome::Retrieved).count();
        Some(ok as f64 / mine.len() as f64)
    }
}

struct Content {
    cid: NodeId,
    publisher: NodeIdx,
}

fn random_honest(net: &mut Network, not: Option<NodeIdx>) -> NodeIdx {
    let n = net.honest_count() as NodeIdx;
    let len = net.len() as NodeIdx;
    loop {
        let i = net.rng().random_range(0..len);
        if !net.is_sybil(i) && Some(i) != not && net.is_online(i) {
            return i;
        }
        if n <= 1 {
            return i;
        }
    }
}

fn prepare(base: &Scenario, seed: u64) -> Result<(Network, Vec<Content>, Vec<PlanRow>), ExperimentError> {
    let mut cfg = base.network.clone();
    cfg.seed = seed;
    let mut net = build_network(cfg)?;
    let mut contents = Vec::with_capacity(base.targets);
    for _ in 0..base.targets {
        let cid = net.random_target();
        let publisher = random_honest(&mut net, None);
        contents.push(Content { cid, publisher });
    }
    let mut plans = Vec::new();
    if let Some(spec) = &base.attack {
        let vantage = random_honest(&mut net, None);
        let n_hat = estimate_network_size(&mut net, vantage, spec.estimate_samples)?.n_hat;
        let k = net.params().k;
        let truth = model_distribution(net.honest_count() as f64, k)?;
        for (t, c) in contents.iter().enumerate() {
            let plan = plan_attack(&mut net, &c.cid, n_hat, &spec.optimizer)?;
            let deployed = deploy(&mut net, &plan, spec.mode, &c.cid).len();
            let census: Vec<NodeId> = net
                .true_closest(&c.cid, k, |_| true)
                .into_iter()
                .map(|i| net.id(i))
                .collect();
            plans.push(PlanRow {
                seed,
                target: t,
                n_hat,
                sybils: plan.sybil_count(),
                deployed,
                planned_dkl: plan.resulting_dkl,
                census_dkl: divergence(&CplHistogram::of(&census, &c.cid), &truth),
                score: plan.score,
            });
        }
    }
    for _ in 0..base.warmup_rounds {
        net.refresh_all();
    }
    Ok((net, contents, plans))
}

fn probe_rung(
    mut net: Network,
    contents: &[Content],
    rung: &Rung,
    probes: &ProbeSchedule,
    seed: u64,
) -> Result<Vec<MetricRow>, ExperimentError> {
    for c in contents {
        provide(&mut net, c.publisher, &c.cid, rung.publish_strategy)?;
    }
    let mut rows = Vec::new();
    let mut rates = Vec::new();
    for _ in 0..probes.max_probes {
        net.advance(probes.interval_min * MINUTE_MS);
        let mut ok = 0;
        for (t, c) in contents.iter().enumerate() {
            let requester = random_honest(&mut net, Some(c.publisher));
            let r = retrieve(&mut net, requester, &c.cid, &rung.lookup_policy);
            ok += r.success as usize;
            rows.push(MetricRow {
                scenario: rung.label.clone(),
                seed,
                target: t,
                probe_time: net.now(),
                outcome: if r.success { Outcome::Retrieved } else { Outcome::Eclipsed },
                contacted: r.total_contacted(),
                records_seen: r.providers.len(),
                terminated_by: r.terminated_by.as_str().to_string(),
            });
        }
        rates.push(ok as f64 / contents.len() as f64);
        if converged(&rates, probes.window, probes.tolerance) {
            break;
        }
    }
    Ok(rows)
}

/// Two consecutive windows of probe rounds whose mean rates differ by less
/// than `tolerance`.
pub fn converged(rates: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || rates.len() < 2 * window {
        return false;
    }
    let n = rates.len();
    let last: f64 = rates[n - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 = rates[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (last - prev).abs() < tolerance
}

/// Runs every rung against the network, attack and content of `base`, one
/// network build per seed. Seeds run in parallel; rows keep seed order.
pub fn run_ladder(base: &Scenario, rungs: &[Rung]) -> Result<ScenarioRun, ExperimentError> {
    base.validate()?;
    if rungs.is_empty() {
        return Err(ExperimentError::Empty);
    }
    for r in rungs {
        r.lookup_policy.validate()?;
    }
    let per_seed: Vec<Result<ScenarioRun, ExperimentError>> = base
        .seeds
        .par_iter()
        .map(|&seed| {
            let (net, contents, plans) = prepare(base, seed)?;
            let mut rows = Vec::new();
            for rung in rungs {
                rows.extend(probe_rung(net.clone(), &contents, rung, &base.probes, seed)?);
            }
            Ok(ScenarioRun { rows, plans })
        })
        .collect();
    let mut out = ScenarioRun::default();
    for r in per_seed {
        let r = r?;
        out.rows.extend(r.rows);
        out.plans.extend(r.plans);
    }
    Ok(out)
}

pub fn run_scenario(s: &Scenario) -> Result<ScenarioRun, ExperimentError> {
    run_ladder(s, &[s.rung()])
}

pub fn run_scenarios(list: &[Scenario]) -> Result<ScenarioRun, ExperimentError> {
    if list.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let mut out = ScenarioRun::default();
    for s in list {
        let r = run_scenario(s)?;
        out.rows.extend(r.rows);
        out.plans.extend(r.plans);
    }
    Ok(out)
}

pub fn write_rows_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<MetricRow>, ExperimentError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

pub fn write_plans_csv<W: Write>(plans: &[PlanRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for p in plans {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub scenario: String,
    pub probes: usize,
    pub retrieved: usize,
    pub eclipsed: usize,
    pub success_rate: f64,
    pub mean_contacted: f64,
}

/// Per-scenario retrieval rates, in first-appearance order.
pub fn success_table(rows: &[MetricRow]) -> Vec<SuccessRow> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for r in rows {
        if !acc.contains_key(&r.scenario) {
            order.push(r.scenario.clone());
        }
        let e = acc.entry(r.scenario.clone()).or_default();
        e.0 += 1;
        e.1 += (r.outcome == Outcome::Retrieved) as usize;
        e.2 += r.contacted;
    }
    order
        .into_iter()
        .map(|s| {
            let (n, ok, c) = acc[&s];
            SuccessRow {
                scenario: s,
                probes: n,
                retrieved: ok,
                eclipsed: n - ok,
                success_rate: ok as f64 / n as f64,
                mean_contacted: c as f64 / n as f64,
            }
        })
        .collect()
}

/// Writes the summary tables under `dir` and returns the success table.
pub fn report(rows: &[MetricRow], dir: &Path) -> Result<Vec<SuccessRow>, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::Empty);
    }
    fs::create_dir_all(dir)?;
    let table = success_table(rows);
    let mut w = csv::Writer::from_path(dir.join("success.csv"))?;
    for r in &table {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut series: BTreeMap<(String, u64), (usize, usize)> = BTreeMap::new();
    let mut stops: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in rows {
        let e = series.entry((r.scenario.clone(), r.probe_time)).or_default();
        e.0 += 1;
        e.1 += (r.outcome == Outcome::Eclipsed) as usize;
        *stops.entry((r.scenario.clone(), r.terminated_by.clone())).or_default() += 1;
    }
    let mut w = csv::Writer::from_path(dir.join("eclipse_over_time.csv"))?;
    w.write_record(["scenario", "probe_time_h", "probes", "eclipse_rate"])?;
    for ((s, t), (n, e)) in &series {
        w.write_record([
            s.clone(),
            format!("{:.2}", *t as f64 / 3_600_000.0),
            n.to_string(),
            format!("{:.4}", *e as f64 / *n as f64),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("termination.csv"))?;
    w.write_record(["scenario", "terminated_by", "count"])?;
    for ((s, t), n) in &stops {
        w.write_record([s.as_str(), t.as_str(), &n.to_string()])?;
    }
    w.flush()?;
    Ok(table)
}

/// Fixed-width histogram as `(bin_start, count)` pairs, empty bins kept.
pub fn histogram(values: &[f64], width: f64) -> Vec<(f64, usize)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let Some(max) = finite.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let bins = (max / width).floor() as usize + 1;
    let mut out: Vec<(f64, usize)> = (0..bins).map(|i| (i as f64 * width, 0)).collect();
    for v in finite {
        out[((v / width).floor() as usize).min(bins - 1)].1 += 1;
    }
    out
}

pub fn write_histogram_csv<W: Write>(values: &[f64], width: f64, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_start", "count"])?;
    for (b, n) in histogram(values, width) {
        w.write_record([format!("{b:.3}"), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Divergence of the k closest found by lookups toward `samples` random keys
/// from random honest origins, against the model for `n_hat`.
pub fn clean_dkl_survey(net: &mut Network, samples: usize, n_hat: f64) -> Result<Vec<f64>, ExperimentError> {
    let k = net.params().k;
    let p = model_distribution(n_hat, k)?;
    let policy = LookupPolicy::find_node();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let target = net.random_target();
        let origin = random_honest(net, None);
        let r = lookup(net, origin, &target, &policy);
        let ids = r.closest_ids();
        out.push(divergence(&CplHistogram::of(&ids[..k.min(ids.len())], &target), &p));
    }
    Ok(out)
}

/// Optimiser runs on the true k closest of `samples` random keys in an
/// identifier population.
pub fn sybil_yield_survey<R: Rng + ?Sized>(
    population: &[NodeId],
    samples: usize,
    n_hat: f64,
    k: usize,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<Vec<(NodeId, Vec<NodeId>, Placement)>, ExperimentError> {
    let p = model_distribution(n_hat, k)?;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let target = NodeId::random(rng);
        let mut all: Vec<_> = population.iter().map(|id| (id.distance(&target), *id)).collect();
        let k = k.min(all.len());
        all.select_nth_unstable(k - 1);
        all.truncate(k);
        all.sort_unstable();
        let census: Vec<NodeId> = all.into_iter().map(|(_, id)| id).collect();
        let placement = optimize_histogram(&CplHistogram::of(&census, &target), &p, cfg);
        out.push((target, census, placement));
    }
    Ok(out)
}

/// Publication cost and overshoot for one fresh publisher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub publisher: NodeIdx,
    pub initial_overshoot: i64,
    pub initial_records: usize,
    pub initial_contacted: usize,
    pub refined_overshoot: i64,
    pub refined_records: usize,
    pub refined_contacted: usize,
    pub zone_initial_overshoot: i64,
    pub zone_refined_overshoot: i64,
    pub region_fresh_contacted: usize,
}

/// For each of `publishers` random honest nodes without estimator state:
/// publish once straight after initialising `d_k`, refine with the refresh
/// lookups, publish again; likewise for the zone variant; and measure a
/// first gated region publication.
pub fn cost_survey(net: &mut Network, publishers: usize) -> Result<Vec<CostSample>, ExperimentError> {
    let mut out = Vec::with_capacity(publishers);
    for _ in 0..publishers {
        let origin = random_honest(net, None);
        let mut est = DkEstimator::default();
        let cid = net.random_target();
        let first = provide_sr_dht_store(net, origin, &cid, &mut est, false)?;
        dk_refine_with_refresh(net, origin, &mut est);
        let cid = net.random_target();
        let second = provide_sr_dht_store(net, origin, &cid, &mut est, false)?;

        let mut zest = DkEstimator::default();
        let cid = net.random_target();
        let zfirst = provide_sr_dht_store(net, origin, &cid, &mut zest, true)?;
        dk_refine_with_refresh(net, origin, &mut zest);
        let cid = net.random_target();
        let zsecond = provide_sr_dht_store(net, origin, &cid, &mut zest, true)?;

        let mut det = RegionDetector::default();
        let cid = net.random_target();
        let region = provide_region_based(net, origin, &cid, &mut det)?;
        out.push(CostSample {
            publisher: origin,
            initial_overshoot: first.overshoot,
            initial_records: first.records_sent,
            initial_contacted: first.contacted_total,
            refined_overshoot: second.overshoot,
            refined_records: second.records_sent,
            refined_contacted: second.contacted_total,
            zone_initial_overshoot: zfirst.overshoot,
            zone_refined_overshoot: zsecond.overshoot,
            region_fresh_contacted: region.contacted_total,
        });
    }
    Ok(out)
}
