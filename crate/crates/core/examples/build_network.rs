//! Builds a network by sequential joins and prints routing-table statistics.
//!
//! `cargo run --release --example build_network -- 2000`

use std::time::Instant;

use sybilkad::{build_network, NetworkConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2_000);
    let t = Instant::now();
    let net = build_network(NetworkConfig::with_size(n, 7)).expect("valid config");
    let sizes: Vec<usize> = (0..n as u32).map(|i| net.node(i).table.len()).collect();
    let depth: Vec<usize> = (0..n as u32).map(|i| net.node(i).table.depth()).collect();
    println!("{n} nodes built in {:.1}s, {} messages", t.elapsed().as_secs_f64(), net.messages_sent());
    println!(
        "table size min {} mean {:.1} max {}",
        sizes.iter().min().unwrap(),
        sizes.iter().sum::<usize>() as f64 / n as f64,
        sizes.iter().max().unwrap()
    );
    println!("mean bucket depth {:.1}", depth.iter().sum::<usize>() as f64 / n as f64);
}
