//! Identifiers of the 256-bit keyspace and the XOR metric over them.
//!
//! Bit 0 is the most significant bit of an identifier, so a common prefix
//! length counts leading bits. Internally an identifier is four big-endian
//! `u64` limbs (limb 0 holds bits 0..64), which makes the derived `Ord`
//! coincide with numeric order.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::IdentError;

/// Number of bits in an identifier.
pub const KEY_BITS: u32 = 256;

/// A position in the DHT keyspace. Used for peers and content alike.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId([u64; 4]);

/// XOR distance between two identifiers.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Distance([u64; 4]);

/// Common prefix length, in `0..=256`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct Cpl(u16);

impl Cpl {
    pub const MAX: Cpl = Cpl(256);

    pub fn new(len: u16) -> Result<Self, IdentError> {
        if len > 256 {
            return Err(IdentError::CplOutOfRange(len as u32));
        }
        Ok(Cpl(len))
    }

    pub fn get(self) -> u16 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Cpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<Cpl> for usize {
    fn from(c: Cpl) -> usize {
        c.index()
    }
}

fn limbs_from_bytes(bytes: &[u8; 32]) -> [u64; 4] {
    let mut limbs = [0u64; 4];
    for (i, limb) in limbs.iter_mut().enumerate() {
        let mut chunk = [0u8; 8];
        chunk.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
        *limb = u64::from_be_bytes(chunk);
    }
    limbs
}

fn limbs_to_bytes(limbs: &[u64; 4]) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, limb) in limbs.iter().enumerate() {
        out[i * 8..i * 8 + 8].copy_from_slice(&limb.to_be_bytes());
    }
    out
}

fn leading_zeros(limbs: &[u64; 4]) -> u32 {
    let mut total = 0;
    for limb in limbs {
        if *limb == 0 {
            total += 64;
        } else {
            return total + limb.leading_zeros();
        }
    }
    total
}

fn parse_hex(s: &str) -> Result<[u64; 4], IdentError> {
    let s = s.trim();
    if s.len() != 64 {
        return Err(IdentError::BadHex(s.to_string()));
    }
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(s, &mut bytes).map_err(|_| IdentError::BadHex(s.to_string()))?;
    Ok(limbs_from_bytes(&bytes))
}

impl NodeId {
    pub const ZERO: NodeId = NodeId([0; 4]);

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        NodeId(limbs_from_bytes(&bytes))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        limbs_to_bytes(&self.0)
    }

    pub fn from_limbs(limbs: [u64; 4]) -> Self {
        NodeId(limbs)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        NodeId([rng.random(), rng.random(), rng.random(), rng.random()])
    }

    /// Bit `i` counted from the most significant end.
    pub fn bit(&self, i: u32) -> bool {
        debug_assert!(i < KEY_BITS);
        let limb = self.0[(i / 64) as usize];
        (limb >> (63 - (i % 64))) & 1 == 1
    }

    pub fn with_bit_flipped(mut self, i: u32) -> Self {
        self.0[(i / 64) as usize] ^= 1 << (63 - (i % 64));
        self
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentError> {
        parse_hex(s).map(NodeId)
    }

    pub fn distance(&self, other: &NodeId) -> Distance {
        xor_distance(self, other)
    }

    /// The identifier at `distance` from `self`.
    pub fn offset_by(&self, distance: &Distance) -> NodeId {
        let mut out = self.0;
        for (o, d) in out.iter_mut().zip(distance.0.iter()) {
            *o ^= d;
        }
        NodeId(out)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for NodeId {
    type Err = IdentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::from_hex(s)
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NodeId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Distance {
    pub const ZERO: Distance = Distance([0; 4]);
    pub const MAX: Distance = Distance([u64::MAX; 4]);

    pub fn from_limbs(limbs: [u64; 4]) -> Self {
        Distance(limbs)
    }

    pub fn limbs(&self) -> [u64; 4] {
        self.0
    }

    /// `2^exp` for `exp < 256`.
    pub fn pow2(exp: u32) -> Distance {
        assert!(exp < KEY_BITS, "2^{exp} does not fit in 256 bits");
        let pos = 255 - exp;
        Distance::ZERO.with_bit_set(pos)
    }

    fn with_bit_set(mut self, msb_index: u32) -> Self {
        self.0[(msb_index / 64) as usize] |= 1 << (63 - (msb_index % 64));
        self
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn leading_zeros(&self) -> u32 {
        leading_zeros(&self.0)
    }

    /// `floor(log2(self))`, or `None` for zero.
    pub fn log2_floor(&self) -> Option<u32> {
        if self.is_zero() {
            None
        } else {
            Some(255 - self.leading_zeros())
        }
    }

    /// Lossy conversion; the result keeps 53 significant bits.
    pub fn to_f64(&self) -> f64 {
        self.0
            .iter()
            .fold(0.0, |acc, limb| acc * 18446744073709551616.0 + *limb as f64)
    }

    /// Fraction of the keyspace, in `[0, 1)`.
    pub fn to_unit(&self) -> f64 {
        self.to_f64() / 2f64.powi(256)
    }

    /// Nearest distance to `fraction * 2^256`, saturating at `Distance::MAX`.
    pub fn from_unit(fraction: f64) -> Distance {
        if !(fraction > 0.0) {
            return Distance::ZERO;
        }
        if fraction >= 1.0 {
            return Distance::MAX;
        }
        let mut limbs = [0u64; 4];
        let mut rest = fraction;
        for limb in limbs.iter_mut() {
            rest *= 18446744073709551616.0;
            let whole = rest.floor();
            *limb = whole as u64;
            rest -= whole;
        }
        Distance(limbs)
    }

    pub fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&limbs_to_bytes(&self.0))
    }

    /// Saturates at `Distance::MAX` when the value needs more than 256 bits.
    pub fn from_biguint(value: &BigUint) -> Distance {
        let bytes = value.to_bytes_be();
        if bytes.len() > 32 {
            return Distance::MAX;
        }
        let mut buf = [0u8; 32];
        buf[32 - bytes.len()..].copy_from_slice(&bytes);
        Distance(limbs_from_bytes(&buf))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(limbs_to_bytes(&self.0))
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentError> {
        parse_hex(s).map(Distance)
    }
}

impl fmt::Debug for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.log2_floor() {
            Some(l) => write!(f, "Distance(~2^{:.3}, floor {l})", self.to_f64().log2()),
            None => f.write_str("Distance(0)"),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Distance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Distance::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn xor_distance(a: &NodeId, b: &NodeId) -> Distance {
    Distance([
        a.0[0] ^ b.0[0],
        a.0[1] ^ b.0[1],
        a.0[2] ^ b.0[2],
        a.0[3] ^ b.0[3],
    ])
}

pub fn cpl(a: &NodeId, b: &NodeId) -> Cpl {
    Cpl(xor_distance(a, b).leading_zeros() as u16)
}

/// Common prefix length implied by a distance from the target.
pub fn cpl_of_distance(d: &Distance) -> Cpl {
    Cpl(d.leading_zeros() as u16)
}

/// Builds an identifier sharing exactly `exact_cpl` leading bits with
/// `target`, optionally strictly closer to it than `closer_than`.
///
/// The prefix is copied, bit `exact_cpl` is flipped and the suffix is drawn
/// from `rng`. With a bound, the suffix is constrained directly: a set bit of
/// the bound below the leading one is chosen (weighted by its value), copied
/// above, cleared there, and randomised below, which always lands under the
/// bound.
pub fn forge_id<R: Rng + ?Sized>(
    target: &NodeId,
    exact_cpl: Cpl,
    closer_than: Option<&Distance>,
    rng: &mut R,
) -> Result<NodeId, IdentError> {
    let c = exact_cpl.get() as u32;
    if c >= KEY_BITS {
        return Err(IdentError::InfeasibleConstraint(
            "an identifier at cpl 256 is the target itself".into(),
        ));
    }
    // Distances with cpl exactly c live in [2^(255-c), 2^(256-c)).
    let top = 255 - c;
    let lower = Distance::pow2(top);
    let random_below = |d: &mut Distance, upto: u32, rng: &mut R| {
        // Randomise value bits 0..upto (LSB-indexed).
        for b in 0..upto {
            if rng.random::<bool>() {
                *d = d.with_bit_set(255 - b);
            }
        }
    };
    let bounded = match closer_than {
        Some(bound) if bound.log2_floor().map_or(true, |l| l <= top) => Some(*bound),
        _ => None,
    };
    let distance = match bounded {
        None => {
            let mut d = lower;
            random_below(&mut d, top, rng);
            d
        }
        Some(bound) => {
            if bound <= lower {
                return Err(IdentError::InfeasibleConstraint(format!(
                    "no identifier at cpl {c} is closer than the given bound"
                )));
            }
            // bound has its leading bit at `top`; the remainder is > 0.
            let set_bits: Vec<u32> = (0..top).rev().filter(|b| bound.bit_lsb(*b)).collect();
            let highest = set_bits[0] as i32;
            let weights: Vec<f64> = set_bits
                .iter()
                .map(|b| 2f64.powi(*b as i32 - highest))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = set_bits[set_bits.len() - 1];
            for (b, w) in set_bits.iter().zip(&weights) {
                if pick < *w {
                    chosen = *b;
                    break;
                }
                pick -= w;
            }
            let mut d = lower;
            for b in (chosen + 1)..top {
                if bound.bit_lsb(b) {
                    d = d.with_bit_set(255 - b);
                }
            }
            random_below(&mut d, chosen, rng);
            d
        }
    };
    Ok(target.offset_by(&distance))
}

impl Distance {
    /// Value bit `b` counted from the least significant end.
    fn bit_lsb(&self, b: u32) -> bool {
        let msb = 255 - b;
        (self.0[(msb / 64) as usize] >> (63 - (msb % 64))) & 1 == 1
    }
}

/// A uniformly random identifier sharing exactly `exact_cpl` bits with `target`.
pub fn random_id_at_cpl<R: Rng + ?Sized>(target: &NodeId, exact_cpl: Cpl, rng: &mut R) -> NodeId {
    forge_id(target, exact_cpl, None, rng).expect("unbounded forge is always feasible below 256")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Places a 4-bit pattern in the top nibble.
    fn id4(bits: u8) -> NodeId {
        NodeId::from_limbs([(bits as u64) << 60, 0, 0, 0])
    }

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = NodeId::random(&mut rng);
        assert!(xor_distance(&a, &a).is_zero());
        assert_eq!(cpl(&a, &a), Cpl::MAX);
    }

    #[test]
    fn distance_to_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = NodeId::random(&mut rng);
        assert_eq!(xor_distance(&a, &NodeId::ZERO).limbs(), a.0);
    }

    #[test]
    fn nibble_examples() {
        assert_eq!(xor_distance(&id4(0b1100), &id4(0b1010)), xor_distance(&id4(0b0110), &NodeId::ZERO));
        assert_eq!(cpl(&id4(0b1100), &id4(0b1101)).get(), 3);
        assert_eq!(cpl(&id4(0b1000), &id4(0b0000)).get(), 0);
    }

    #[test]
    fn hex_round_trip_and_format() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = NodeId::random(&mut rng);
        let h = a.to_hex();
        assert_eq!(h.len(), 64);
        assert_eq!(h, h.to_lowercase());
        assert_eq!(NodeId::from_hex(&h).unwrap(), a);
        assert!(NodeId::from_hex("abc").is_err());
    }

    #[test]
    fn pow2_and_log2() {
        assert_eq!(Distance::pow2(0).log2_floor(), Some(0));
        assert_eq!(Distance::pow2(255).log2_floor(), Some(255));
        assert_eq!(cpl_of_distance(&Distance::pow2(255)).get(), 0);
        assert_eq!(cpl_of_distance(&Distance::pow2(0)).get(), 255);
    }

    #[test]
    fn unit_conversion_round_trip() {
        let d = Distance::from_unit(0.001);
        assert!((d.to_unit() - 0.001).abs() < 1e-15);
        let big = Distance::pow2(200);
        assert_eq!(Distance::from_biguint(&big.to_biguint()), big);
    }

    #[test]
    fn forge_first_bit_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = NodeId::random(&mut rng);
        let f = forge_id(&t, Cpl::new(0).unwrap(), None, &mut rng).unwrap();
        assert_ne!(f.bit(0), t.bit(0));
        assert_eq!(cpl(&f, &t).get(), 0);
    }

    #[test]
    fn forge_unbounded_has_exact_cpl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = NodeId::random(&mut rng);
        let f = forge_id(&t, Cpl::new(10).unwrap(), None, &mut rng).unwrap();
        assert_eq!(cpl(&f, &t).get(), 10);
    }

    #[test]
    fn forge_closer_than_an_existing_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let t = NodeId::random(&mut rng);
            let c = Cpl::new(rng.random_range(0..40)).unwrap();
            let honest = random_id_at_cpl(&t, c, &mut rng);
            let bound = xor_distance(&honest, &t);
            let f = forge_id(&t, c, Some(&bound), &mut rng).unwrap();
            // Independent recomputation: bit-by-bit prefix and numeric comparison.
            let shared = (0..256).take_while(|i| f.bit(*i) == t.bit(*i)).count();
            assert_eq!(shared, c.index());
            assert!(f.to_biguint_for_test(&t) < bound.to_biguint());
        }
    }

    #[test]
    fn forge_rejects_infeasible_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = NodeId::random(&mut rng);
        let c = Cpl::new(12).unwrap();
        let minimal = Distance::pow2(255 - 12);
        assert!(matches!(
            forge_id(&t, c, Some(&minimal), &mut rng),
            Err(IdentError::InfeasibleConstraint(_))
        ));
        assert!(forge_id(&t, Cpl::MAX, None, &mut rng).is_err());
    }

    #[test]
    fn loose_bound_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = NodeId::random(&mut rng);
        let f = forge_id(&t, Cpl::new(5).unwrap(), Some(&Distance::MAX), &mut rng).unwrap();
        assert_eq!(cpl(&f, &t).get(), 5);
    }

    impl NodeId {
        fn to_biguint_for_test(&self, t: &NodeId) -> BigUint {
            let a = BigUint::from_bytes_be(&self.to_bytes());
            let b = BigUint::from_bytes_be(&t.to_bytes());
            a ^ b
        }
    }
}
