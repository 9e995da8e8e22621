//! Publication radius estimation and refinement, with the overshoot and
//! cost of each publication.

use sybilkad::publish::{dk_refine_with_refresh, provide_sr_dht_store, provide_standard, DkEstimator};
use sybilkad::{build_network, NetworkConfig};

fn main() {
    let mut net = build_network(NetworkConfig::with_size(5_000, 5)).expect("valid config");
    let origin = 42;
    let mut est = DkEstimator::default();
    let cid = net.random_target();
    let std = provide_standard(&mut net, origin, &cid);
    println!("standard    records {} contacted {}", std.records_sent, std.contacted_total);
    for round in 0..4 {
        let cid = net.random_target();
        let r = provide_sr_dht_store(&mut net, origin, &cid, &mut est, false).unwrap();
        println!(
            "sr round {round}  records {} overshoot {} contacted {} (estimation {}), log2 radius {:?}",
            r.records_sent,
            r.overshoot,
            r.contacted_total,
            r.estimation_contacted,
            est.log2()
        );
        dk_refine_with_refresh(&mut net, origin, &mut est);
    }
}
