use std::collections::BTreeSet;

use sybilkad::attack::{deploy, plan_attack, OptimizerConfig};
use sybilkad::node::SybilMode;
use sybilkad::publish::{
    dk_initialize, provide_region_based, provide_sr_dht_store, provide_standard, DkEstimator, RegionDetector,
};
use sybilkad::{build_network, Network, NetworkConfig};

fn honest(net: &Network, recipients: &[u32]) -> BTreeSet<u32> {
    recipients.iter().copied().filter(|r| !net.is_sybil(*r)).collect()
}

#[test]
fn standard_publication_reaches_the_true_nearest() {
    let mut net = build_network(NetworkConfig::with_size(64, 40)).unwrap();
    for origin in 0..10u32 {
        let cid = net.random_target();
        let r = provide_standard(&mut net, origin, &cid);
        assert_eq!(r.records_sent, 20);
        let truth: BTreeSet<u32> = net.true_closest(&cid, 20, |_| true).into_iter().collect();
        let got: BTreeSet<u32> = r.recipients.iter().copied().collect();
        // The origin never sends itself a record.
        let missing: Vec<_> = truth.difference(&got).filter(|m| **m != origin).collect();
        assert!(missing.is_empty(), "cid {cid}: missing {missing:?}");
        for m in got {
            assert_eq!(net.node(m).records(&cid).len(), 1);
        }
    }
}

#[test]
fn forced_region_publication_covers_standard_recipients() {
    let base = build_network(NetworkConfig::with_size(800, 41)).unwrap();
    for origin in [0u32, 200, 400] {
        let mut a = base.clone();
        let mut b = base.clone();
        let cid = a.random_target();
        b.random_target();
        let std = provide_standard(&mut a, origin, &cid);
        let mut detector = RegionDetector {
            n_hat: Some(800.0),
            ..RegionDetector::forced()
        };
        let reg = provide_region_based(&mut b, origin, &cid, &mut detector).unwrap();
        let s: BTreeSet<u32> = std.recipients.iter().copied().collect();
        let r: BTreeSet<u32> = reg.recipients.iter().copied().collect();
        assert!(s.is_subset(&r), "{:?}", s.difference(&r).collect::<Vec<_>>());
    }
}

#[test]
fn clean_gate_publishes_like_standard() {
    let base = build_network(NetworkConfig::with_size(800, 42)).unwrap();
    let mut a = base.clone();
    let mut b = base.clone();
    let cid = a.random_target();
    b.random_target();
    let std = provide_standard(&mut a, 3, &cid);
    let mut detector = RegionDetector::with_estimate(800.0);
    let reg = provide_region_based(&mut b, 3, &cid, &mut detector).unwrap();
    assert!(!reg.verdict.clone().unwrap().is_attack);
    assert_eq!(reg.recipients, std.recipients);
}

#[test]
fn sr_dht_store_keeps_more_honest_holders_under_attack() {
    let mut base = build_network(NetworkConfig::with_size(1_000, 43)).unwrap();
    let mut checked = 0;
    for _ in 0..4 {
        let cid = base.random_target();
        let plan = plan_attack(&mut base, &cid, 1_000.0, &OptimizerConfig::default()).unwrap();
        deploy(&mut base, &plan, SybilMode::Active, &cid);
        base.refresh_all();
        for origin in [10u32, 500] {
            let mut a = base.clone();
            let mut b = base.clone();
            let std = provide_standard(&mut a, origin, &cid);
            let mut est = DkEstimator::default();
            let sr = provide_sr_dht_store(&mut b, origin, &cid, &mut est, false).unwrap();
            assert!(sr.records_sent >= 20);
            let (hs, hr) = (honest(&a, &std.recipients), honest(&b, &sr.recipients));
            assert!(hr.len() >= hs.len(), "sr {} honest vs standard {}", hr.len(), hs.len());
            checked += 1;
        }
    }
    assert_eq!(checked, 8);
}

#[test]
fn initial_radius_matches_population_density() {
    let n = 3_000.0;
    let mut net = build_network(NetworkConfig::with_size(n as usize, 44)).unwrap();
    for origin in [0u32, 700, 1_400, 2_100] {
        let mut est = DkEstimator::default();
        dk_initialize(&mut net, origin, &mut est).unwrap();
        let ratio = est.s_t().to_unit() / (20.0 / n);
        assert!((0.5..=2.0).contains(&ratio), "origin {origin}: ratio {ratio}");
    }
}

#[test]
fn fewer_initial_queries_spread_wider() {
    let mut net = build_network(NetworkConfig::with_size(3_000, 45)).unwrap();
    let spread = |net: &mut Network, q: usize| {
        let xs: Vec<f64> = (0..10u32)
            .map(|i| {
                let mut est = DkEstimator::new(0.1, q, 16);
                dk_initialize(net, i * 250, &mut est).unwrap();
                est.s_t().to_unit().ln()
            })
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let one = spread(&mut net, 1);
    let ten = spread(&mut net, 10);
    assert!(one > ten, "variance q=1 {one} vs q=10 {ten}");
}

#[test]
fn estimator_needs_enough_peers() {
    let mut net = build_network(NetworkConfig::with_size(5, 46)).unwrap();
    let mut est = DkEstimator::default();
    assert!(dk_initialize(&mut net, 0, &mut est).is_err());
}
