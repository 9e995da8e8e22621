//! One closest-node lookup with its query trace written as CSV to stdout.

use std::io;

use sybilkad::lookup::{lookup, LookupPolicy};
use sybilkad::{build_network, NetworkConfig};

fn main() {
    let mut net = build_network(NetworkConfig::with_size(3_000, 11)).expect("valid config");
    let target = net.random_target();
    let r = lookup(&mut net, 0, &target, &LookupPolicy::find_node());
    let truth = net.true_closest(&target, 20, |_| true);
    eprintln!(
        "contacted {}, {:?}, {} ms, exact k closest: {}",
        r.contacted,
        r.terminated_by,
        r.elapsed_ms,
        r.closest_indices() == truth
    );
    r.write_trace_csv(io::stdout()).expect("stdout");
}
