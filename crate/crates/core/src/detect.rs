//! KL-divergence test on the prefix-length profile of a key's k closest
//! nodes.
//!
//! The model `p(x)` is the expected share of the k closest of `n` uniform
//! identifiers that share exactly `x` bits with a random key. If `B_x` counts
//! the identifiers sharing at least `x` bits, `B_x ~ Bin(n, 2^-x)` and the k
//! closest contain `min(k, B_x)` of them, so
//! `p(x) = (E[min(k, B_x)] - E[min(k, B_{x+1})]) / k`.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::error::DetectError;
use crate::ident::{cpl, NodeId};
use crate::lookup::{lookup, LookupPolicy};
use crate::simnet::{Network, NodeIdx};

/// Divergence above which a key is flagged as under attack.
pub const DETECTION_THRESHOLD: f64 = 0.94;

const BINS: usize = 257;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CplHistogram {
    counts: BTreeMap<u16, usize>,
}

impl CplHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<I: IntoIterator<Item = (u16, usize)>>(pairs: I) -> Self {
        let mut h = Self::new();
        for (c, n) in pairs {
            h.add(c, n);
        }
        h
    }

    /// Histogram of `cpl(id, target)` over `ids`.
    pub fn of(ids: &[NodeId], target: &NodeId) -> Self {
        let mut h = Self::new();
        for id in ids {
            h.add(cpl(id, target).get(), 1);
        }
        h
    }

    pub fn add(&mut self, cpl: u16, n: usize) {
        assert!(cpl as usize <= 256, "cpl {cpl} out of range");
        if n > 0 {
            *self.counts.entry(cpl).or_insert(0) += n;
        }
    }

    /// Removes up to `n` entries at `cpl`, returning how many were removed.
    pub fn remove(&mut self, cpl: u16, n: usize) -> usize {
        let Some(c) = self.counts.get_mut(&cpl) else {
            return 0;
        };
        let taken = n.min(*c);
        *c -= taken;
        if *c == 0 {
            self.counts.remove(&cpl);
        }
        taken
    }

    pub fn count(&self, cpl: u16) -> usize {
        self.counts.get(&cpl).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, usize)> + '_ {
        self.counts.iter().map(|(c, n)| (*c, *n))
    }

    pub fn min_cpl(&self) -> Option<u16> {
        self.counts.keys().next().copied()
    }

    pub fn max_cpl(&self) -> Option<u16> {
        self.counts.keys().next_back().copied()
    }

    pub fn fraction(&self, cpl: u16) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.count(cpl) as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDistribution {
    probs: Vec<f64>,
    pub n_used: f64,
    pub k: usize,
}

impl ModelDistribution {
    /// Exact order-statistics form.
    pub fn closed_form(n: f64, k: usize) -> Result<Self, DetectError> {
        let n_int = n.round();
        if !(n_int > k as f64) {
            return Err(DetectError::TooSmall { n, k });
        }
        let n_u = n_int as u64;
        let kf = k as f64;
        let mut e = vec![0.0; BINS + 1];
        for (x, slot) in e.iter_mut().enumerate() {
            let p = 0.5f64.powi(x as i32);
            let mean = n_int * p;
            *slot = if x == 0 {
                kf
            } else if mean > kf {
                let b = Binomial::new(p, n_u).expect("valid binomial");
                let short: f64 = (0..k as u64).map(|j| (kf - j as f64) * b.pmf(j)).sum();
                kf - short
            } else if mean > 1e-4 {
                let b = Binomial::new(p, n_u).expect("valid binomial");
                let mut excess = 0.0;
                let mut j = k as u64 + 1;
                loop {
                    let term = (j as f64 - kf) * b.pmf(j);
                    excess += term;
                    if j >= n_u || (term < 1e-18 && j as f64 > mean) {
                        break;
                    }
                    j += 1;
                }
                mean - excess
            } else {
                mean
            };
        }
        let probs = (0..BINS).map(|x| ((e[x] - e[x + 1]) / kf).max(0.0)).collect();
        Ok(ModelDistribution {
            probs,
            n_used: n_int,
            k,
        })
    }

    /// Simulates the k smallest of `n` uniform points in `[0, 1)` directly
    /// through their order statistics, `trials` times.
    pub fn monte_carlo<R: Rng + ?Sized>(
        n: f64,
        k: usize,
        trials: usize,
        rng: &mut R,
    ) -> Result<Self, DetectError> {
        let n_int = n.round();
        if !(n_int > k as f64) {
            return Err(DetectError::TooSmall { n, k });
        }
        let mut counts = vec![0u64; BINS];
        for _ in 0..trials {
            let mut log_survival = 0.0f64;
            for i in 0..k {
                let v: f64 = 1.0 - rng.random::<f64>();
                log_survival += v.ln() / (n_int - i as f64);
                let u = -log_survival.exp_m1();
                let c = if u <= 0.0 {
                    256
                } else {
                    ((-u.log2()).floor() as usize).min(255)
                };
                counts[c] += 1;
            }
        }
        let total = (trials * k) as f64;
        Ok(ModelDistribution {
            probs: counts.into_iter().map(|c| c as f64 / total).collect(),
            n_used: n_int,
            k,
        })
    }

    /// An arbitrary model, normalised; bins past the slice are zero.
    pub fn from_probs(probs: &[f64], k: usize) -> Result<Self, DetectError> {
        let total: f64 = probs.iter().sum();
        if probs.len() > BINS || !(total > 0.0) || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(DetectError::BadModel);
        }
        let mut v = vec![0.0; BINS];
        for (slot, p) in v.iter_mut().zip(probs) {
            *slot = p / total;
        }
        Ok(ModelDistribution {
            probs: v,
            n_used: 0.0,
            k,
        })
    }

    pub fn prob(&self, cpl: u16) -> f64 {
        self.probs.get(cpl as usize).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mode(&self) -> u16 {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best as u16
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cpl", "probability"])?;
        for (c, p) in self.probs.iter().enumerate() {
            if *p > 1e-12 {
                w.write_record([c.to_string(), format!("{p:.12}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

type ModelKey = (u64, usize);

fn cache() -> &'static Mutex<BTreeMap<ModelKey, Arc<ModelDistribution>>> {
    static CACHE: OnceLock<Mutex<BTreeMap<ModelKey, Arc<ModelDistribution>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Closed-form model for a size estimate, memoised per rounded `(n, k)`.
pub fn model_distribution(n: f64, k: usize) -> Result<Arc<ModelDistribution>, DetectError> {
    let key = (n.round() as u64, k);
    if let Some(m) = cache().lock().expect("model cache").get(&key) {
        return Ok(Arc::clone(m));
    }
    let m = Arc::new(ModelDistribution::closed_form(n, k)?);
    cache()
        .lock()
        .expect("model cache")
        .insert(key, Arc::clone(&m));
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub d_kl: f64,
    pub threshold: f64,
    pub is_attack: bool,
}

/// `sum_x q(x) ln(q(x) / p(x))` with `q = counts / total`.
pub fn divergence(q: &CplHistogram, p: &ModelDistribution) -> f64 {
    let total = q.total() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let mut d = 0.0;
    for (c, n) in q.iter() {
        let qx = n as f64 / total;
        let px = p.prob(c);
        if px <= 0.0 {
            return f64::INFINITY;
        }
        d += qx * (qx / px).ln();
    }
    d.max(0.0)
}

pub fn kl_divergence(q: &CplHistogram, p: &ModelDistribution) -> DetectionVerdict {
    kl_divergence_with(q, p, DETECTION_THRESHOLD)
}

pub fn kl_divergence_with(q: &CplHistogram, p: &ModelDistribution, threshold: f64) -> DetectionVerdict {
    let d_kl = divergence(q, p);
    DetectionVerdict {
        d_kl,
        threshold,
        is_attack: d_kl > threshold,
    }
}

pub fn empirical_distribution(
    k_closest: &[NodeId],
    target: &NodeId,
    k: usize,
) -> Result<CplHistogram, DetectError> {
    if k_closest.len() != k {
        return Err(DetectError::WrongCardinality {
            expected: k,
            got: k_closest.len(),
        });
    }
    Ok(CplHistogram::of(k_closest, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub n_hat: f64,
    pub samples: usize,
    pub contacted: usize,
}

/// `k / mean(d_k)` with `d_k` the keyspace fraction enclosing the k closest
/// nodes found by each of `samples` lookups toward random keys.
pub fn estimate_network_size(
    net: &mut Network,
    origin: NodeIdx,
    samples: usize,
) -> Result<SizeEstimate, DetectError> {
    let k = net.params().k;
    let policy = LookupPolicy::find_node();
    let mut sum = 0.0;
    let mut contacted = 0;
    for _ in 0..samples.max(1) {
        let target = net.random_target();
        let r = lookup(net, origin, &target, &policy);
        contacted += r.contacted;
        let Some(dk) = r.kth_distance(k) else {
            return Err(DetectError::InsufficientPeers {
                needed: k,
                found: r.closest.len(),
            });
        };
        sum += dk.to_unit();
    }
    let mean = sum / samples.max(1) as f64;
    Ok(SizeEstimate {
        n_hat: k as f64 / mean,
        samples: samples.max(1),
        contacted,
    })
}

/// Runs the test on a lookup's k closest against the model for `n_hat`.
pub fn detect(
    k_closest: &[NodeId],
    target: &NodeId,
    n_hat: f64,
    k: usize,
) -> Result<DetectionVerdict, DetectError> {
    let q = empirical_distribution(k_closest, target, k)?;
    let p = model_distribution(n_hat, k)?;
    Ok(kl_divergence(&q, &p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_sums_to_one_and_peaks_at_nine() {
        let m = ModelDistribution::closed_form(13_239.0, 20).unwrap();
        let s: f64 = m.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
        assert!(m.probs().iter().all(|p| *p >= 0.0));
        assert_eq!(m.mode(), 9);
        assert!(m.prob(40) < 1e-6);
    }

    #[test]
    fn two_bin_closed_form() {
        let p = ModelDistribution {
            probs: {
                let mut v = vec![0.0; BINS];
                v[0] = 0.5;
                v[1] = 0.5;
                v
            },
            n_used: 0.0,
            k: 2,
        };
        let q = CplHistogram::from_counts([(0, 2)]);
        assert!((divergence(&q, &p) - 2f64.ln()).abs() < 1e-12);
        let q = CplHistogram::from_counts([(0, 1), (1, 1)]);
        assert!(divergence(&q, &p).abs() < 1e-12);
        let q = CplHistogram::from_counts([(3, 2)]);
        assert!(kl_divergence(&q, &p).is_attack);
    }

    #[test]
    fn cardinality_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = NodeId::random(&mut rng);
        let ids: Vec<_> = (0..19).map(|_| NodeId::random(&mut rng)).collect();
        assert_eq!(
            empirical_distribution(&ids, &t, 20),
            Err(DetectError::WrongCardinality { expected: 20, got: 19 })
        );
    }

    #[test]
    fn too_small_model_rejected() {
        assert!(ModelDistribution::closed_form(20.0, 20).is_err());
    }

    #[test]
    fn cache_returns_same_instance() {
        let a = model_distribution(5000.0, 20).unwrap();
        let b = model_distribution(5000.2, 20).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
