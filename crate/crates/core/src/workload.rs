//! Seeded key/operation generators for tests and benchmarks.

use bytes::Bytes;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipfian { theta: f64 },
}

impl Distribution {
    pub fn zipfian() -> Distribution {
        Distribution::Zipfian { theta: 0.99 }
    }
}

/// Percentages of each operation kind; must sum to 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpMix {
    pub put: u8,
    pub get: u8,
    pub delete: u8,
}

impl OpMix {
    pub const READ_ONLY: OpMix = OpMix { put: 0, get: 100, delete: 0 };
    pub const WRITE_ONLY: OpMix = OpMix { put: 100, get: 0, delete: 0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub distribution: Distribution,
    /// Keys are drawn from `0..key_space`.
    pub key_space: u64,
    pub value_size: usize,
    pub op_mix: OpMix,
    pub op_count: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            distribution: Distribution::Uniform,
            key_space: 2_000_000_000,
            value_size: 1024,
            op_mix: OpMix { put: 50, get: 50, delete: 0 },
            op_count: 100_000,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkloadOp {
    Put(Bytes, Bytes),
    Get(Bytes),
    Delete(Bytes),
}

impl WorkloadOp {
    pub fn key(&self) -> &Bytes {
        match self {
            WorkloadOp::Put(k, _) | WorkloadOp::Get(k) | WorkloadOp::Delete(k) => k,
        }
    }
}

/// Encodes an integer key so byte order matches numeric order.
pub fn encode_key(n: u64) -> Bytes {
    Bytes::copy_from_slice(&n.to_be_bytes())
}

/// YCSB-style zipfian over ranks `0..n`; rank 0 is the most popular.
#[derive(Clone, Debug)]
pub struct Zipfian {
    n: u64,
    theta: f64,
    alpha: f64,
    zetan: f64,
    eta: f64,
}

impl Zipfian {
    pub fn new(n: u64, theta: f64) -> Zipfian {
        assert!(n >= 1 && theta > 0.0 && theta < 1.0);
        let zetan = zeta(n, theta);
        let zeta2 = zeta(2.min(n), theta);
        let alpha = 1.0 / (1.0 - theta);
        let eta = (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta2 / zetan);
        Zipfian {
            n,
            theta,
            alpha,
            zetan,
            eta,
        }
    }

    /// Normalising constant Σ 1/i^θ for i in 1..=n.
    pub fn zetan(&self) -> f64 {
        self.zetan
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1.min(self.n - 1);
        }
        let r = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        r.min(self.n - 1)
    }
}

fn zeta(n: u64, theta: f64) -> f64 {
    (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum()
}

/// Deterministic operation stream for a [`WorkloadSpec`].
pub struct Workload {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipfian>,
    issued: u64,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Workload {
        let m = spec.op_mix;
        assert_eq!(m.put as u32 + m.get as u32 + m.delete as u32, 100, "op mix must sum to 100");
        assert!(spec.key_space >= 1);
        let zipf = match spec.distribution {
            Distribution::Uniform => None,
            Distribution::Zipfian { theta } => Some(Zipfian::new(spec.key_space, theta)),
        };
        Workload {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            zipf,
            issued: 0,
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn next_key_index(&mut self) -> u64 {
        match &self.zipf {
            None => self.rng.gen_range(0..self.spec.key_space),
            Some(z) => z.sample(&mut self.rng),
        }
    }

    pub fn next_key(&mut self) -> Bytes {
        encode_key(self.next_key_index())
    }

    pub fn next_value(&mut self) -> Bytes {
        let mut v = vec![0u8; self.spec.value_size];
        self.rng.fill_bytes(&mut v);
        Bytes::from(v)
    }

    /// Next operation, or `None` after `op_count` operations.
    pub fn next_op(&mut self) -> Option<WorkloadOp> {
        if self.issued >= self.spec.op_count {
            return None;
        }
        self.issued += 1;
        let roll = self.rng.gen_range(0..100u8);
        let key = self.next_key();
        let m = self.spec.op_mix;
        Some(if roll < m.put {
            let v = self.next_value();
            WorkloadOp::Put(key, v)
        } else if roll < m.put + m.get {
            WorkloadOp::Get(key)
        } else {
            WorkloadOp::Delete(key)
        })
    }
}

impl Iterator for Workload {
    type Item = WorkloadOp;

    fn next(&mut self) -> Option<WorkloadOp> {
        self.next_op()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(distribution: Distribution, key_space: u64) -> WorkloadSpec {
        WorkloadSpec {
            distribution,
            key_space,
            value_size: 8,
            op_mix: OpMix::READ_ONLY,
            op_count: 10,
            seed: 9,
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<_> = Workload::new(WorkloadSpec::default()).take(500).collect();
        let b: Vec<_> = Workload::new(WorkloadSpec::default()).take(500).collect();
        assert_eq!(a, b);
        let mut other = WorkloadSpec::default();
        other.seed += 1;
        let c: Vec<_> = Workload::new(other).take(500).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn op_mix_is_respected() {
        let s = WorkloadSpec {
            op_mix: OpMix { put: 50, get: 40, delete: 10 },
            op_count: 100_000,
            key_space: 1000,
            value_size: 4,
            ..WorkloadSpec::default()
        };
        let (mut p, mut g, mut d) = (0, 0, 0);
        for op in Workload::new(s) {
            match op {
                WorkloadOp::Put(..) => p += 1,
                WorkloadOp::Get(_) => g += 1,
                WorkloadOp::Delete(_) => d += 1,
            }
        }
        assert_eq!(p + g + d, 100_000);
        assert!((p as f64 / 1e5 - 0.5).abs() < 0.01);
        assert!((g as f64 / 1e5 - 0.4).abs() < 0.01);
        assert!((d as f64 / 1e5 - 0.1).abs() < 0.01);
    }

    #[test]
    fn uniform_passes_chi_square() {
        let n = 1000usize;
        let draws = 1_000_000u64;
        let mut w = Workload::new(spec(Distribution::Uniform, n as u64));
        let mut counts = vec![0u64; n];
        for _ in 0..draws {
            counts[w.next_key_index() as usize] += 1;
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 999 degrees of freedom: mean 999, sd ≈ 44.7; 1150 is beyond p = 0.001.
        assert!(chi2 < 1150.0, "chi2 = {chi2}");
        let sigma = expected.sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - expected).abs() < 5.0 * sigma));
    }

    #[test]
    fn zipfian_top_key_matches_analytic_mass() {
        let n = 1000u64;
        let draws = 1_000_000u64;
        let theta = 0.99;
        let mut w = Workload::new(spec(Distribution::Zipfian { theta }, n));
        let mut top = 0u64;
        let mut second = 0u64;
        for _ in 0..draws {
            match w.next_key_index() {
                0 => top += 1,
                1 => second += 1,
                _ => {}
            }
        }
        // Independent normalisation: generalized harmonic number H(n, θ).
        let h: f64 = (1..=n).map(|r| (r as f64).powf(-theta)).sum();
        let p1 = 1.0 / h;
        let got = top as f64 / draws as f64;
        assert!((got - p1).abs() / p1 < 0.05, "top {got} vs {p1}");
        let p2 = 2f64.powf(-theta) / h;
        let got2 = second as f64 / draws as f64;
        assert!((got2 - p2).abs() / p2 < 0.05, "second {got2} vs {p2}");
    }

    #[test]
    fn keys_sort_numerically() {
        assert!(encode_key(2) < encode_key(10));
        assert!(encode_key(255) < encode_key(256));
    }
}
