//! The prefix-length test on clean keys and on a key with Sybils placed
//! naively at the deepest prefix lengths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sybilkad::detect::{detect, model_distribution};
use sybilkad::lookup::{lookup, LookupPolicy};
use sybilkad::{build_network, forge_id, Cpl, NetworkConfig};

fn main() {
    let n = 5_000;
    let mut net = build_network(NetworkConfig::with_size(n, 3)).expect("valid config");
    let model = model_distribution(n as f64, 20).unwrap();
    println!("model mode at cpl {}", model.mode());
    for _ in 0..5 {
        let t = net.random_target();
        let r = lookup(&mut net, 1, &t, &LookupPolicy::find_node());
        let v = detect(&r.closest_ids()[..20], &t, n as f64, 20).unwrap();
        println!("clean   D_KL {:.3} flagged {}", v.d_kl, v.is_attack);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = net.random_target();
    let mut ids = net.true_closest(&t, 20, |_| true).into_iter().map(|i| net.id(i)).collect::<Vec<_>>();
    for slot in ids.iter_mut().skip(10) {
        *slot = forge_id(&t, Cpl::new(20).unwrap(), None, &mut rng).unwrap();
    }
    let v = detect(&ids, &t, n as f64, 20).unwrap();
    println!("10 Sybils at cpl 20: D_KL {:.3} flagged {}", v.d_kl, v.is_attack);
}
