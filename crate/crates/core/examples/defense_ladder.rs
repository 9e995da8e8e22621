//! Retrieval success of each defense against the optimised active attack.
//! Writes summary tables to `ladder_summary/`.
//!
//! `cargo run --release --example defense_ladder -- 13239`

use std::path::Path;

use sybilkad::experiments::{defense_ladder, report, run_ladder, AttackSpec, Scenario};
use sybilkad::NetworkConfig;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3_000);
    let s = Scenario {
        name: "ladder".into(),
        network: NetworkConfig::with_size(n, 0),
        attack: Some(AttackSpec::default()),
        targets: 3,
        seeds: vec![1, 2],
        ..Scenario::default()
    };
    let run = run_ladder(&s, &defense_ladder()).expect("ladder");
    for p in &run.plans {
        println!("seed {} target {}: {} Sybils, planned D_KL {:.3}", p.seed, p.target, p.sybils, p.planned_dkl);
    }
    for row in report(&run.rows, Path::new("ladder_summary")).expect("report") {
        println!("{:24} {:5.1}% retrieved, {:.1} contacted", row.scenario, row.success_rate * 100.0, row.mean_contacted);
    }
}
