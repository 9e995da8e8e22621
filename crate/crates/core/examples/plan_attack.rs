//! Plans an undetectable placement for one key, deploys it and checks that
//! the network's k closest now hold the planned profile.

use sybilkad::attack::{deploy, plan_attack, ForgeCostModel, OptimizerConfig};
use sybilkad::detect::{divergence, model_distribution, CplHistogram};
use sybilkad::node::SybilMode;
use sybilkad::{build_network, NetworkConfig};

fn main() {
    let n = 5_000;
    let mut net = build_network(NetworkConfig::with_size(n, 21)).expect("valid config");
    let target = net.random_target();
    let plan = plan_attack(&mut net, &target, n as f64, &OptimizerConfig::default()).unwrap();
    println!("{}", plan.to_json());
    println!("forging cost {:.3}s", ForgeCostModel::default().plan_cost(&plan));

    deploy(&mut net, &plan, SybilMode::Active, &target);
    let census: Vec<_> = net.true_closest(&target, 20, |_| true).into_iter().collect();
    let sybils = census.iter().filter(|i| net.is_sybil(**i)).count();
    let ids: Vec<_> = census.iter().map(|i| net.id(*i)).collect();
    let p = model_distribution(n as f64, 20).unwrap();
    println!(
        "after deployment: {sybils}/20 of the k closest are Sybils, D_KL {:.3}",
        divergence(&CplHistogram::of(&ids, &target), &p)
    );
}
