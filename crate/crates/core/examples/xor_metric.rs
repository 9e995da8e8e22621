//! Identifier arithmetic: XOR distance, prefix lengths and forging an id at
//! a chosen prefix length below a distance bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sybilkad::{cpl, forge_id, xor_distance, Cpl, NodeId};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = NodeId::random(&mut rng);
    let b = NodeId::random(&mut rng);
    println!("a    = {a}");
    println!("b    = {b}");
    println!("a^b  = {}", xor_distance(&a, &b).to_hex());
    println!("cpl  = {}", cpl(&a, &b).get());

    let target = NodeId::random(&mut rng);
    let honest = forge_id(&target, Cpl::new(12).unwrap(), None, &mut rng).unwrap();
    let bound = honest.distance(&target);
    let sybil = forge_id(&target, Cpl::new(12).unwrap(), Some(&bound), &mut rng).unwrap();
    println!("\ntarget = {target}");
    println!("honest at cpl 12, log2 distance {:?}", bound.log2_floor());
    println!(
        "sybil  at cpl {}, closer: {}",
        cpl(&sybil, &target).get(),
        sybil.distance(&target) < bound
    );
}
