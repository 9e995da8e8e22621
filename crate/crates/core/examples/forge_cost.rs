//! Expected brute-force time per identifier prefix length.

use sybilkad::attack::ForgeCostModel;

fn main() {
    let m = ForgeCostModel::default();
    for c in [0u16, 8, 12, 16, 20, 25, 30, 35, 40] {
        let s = m.cost(c);
        println!("cpl {c:2}: {s:>14.3} s  ({:.2} h)", s / 3600.0);
    }
}
