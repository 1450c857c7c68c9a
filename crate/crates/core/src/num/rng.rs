use serde::{Deserialize, Serialize};

use super::Scalar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer; full-period bijection on u64.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit PRNG: SplitMix64 (Steele, Lea & Flood 2014).
///
/// All randomness in the crate flows through this generator so that a run is
/// reproducible bit for bit from its root seed on any platform. Named streams
/// ([`Rng::stream`]) derive independent generators from a root seed, so
/// consuming one stream never perturbs another.
///
/// The implementation is integer-only; `f64` values come from the top 53 bits
/// of `next_u64`, and normals from the Box-Muller transform.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: mix(seed) }
    }

    /// Derives an independent generator for `(root, name, indices)`.
    ///
    /// The name is absorbed with FNV-1a, each index with the SplitMix64
    /// finalizer, so streams like `("batch", [task, epoch])` are distinct for
    /// every task/epoch pair.
    pub fn stream(root: u64, name: &str, indices: &[u64]) -> Self {
        let mut h = FNV_OFFSET;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        let mut s = root ^ h;
        for &ix in indices {
            s = mix(s ^ mix(ix));
        }
        Self { state: mix(s) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        lo + (hi - lo) * S::of(self.next_f64())
    }

    /// Standard normal via Box-Muller; consumes two uniforms per draw.
    pub fn normal<S: Scalar>(&mut self) -> S {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln() finite
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        S::of(r * theta.cos())
    }

    /// Uniform in `[0, n)`, unbiased via rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "choose_k: k {k} > n {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for step in 0..k {
            let j = step + self.below((n - step) as u64) as usize;
            pool.swap(step, j);
            out.push(pool[step]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn named_streams_are_stable_and_distinct() {
        let mut a = Rng::stream(7, "data", &[1, 2]);
        let mut a2 = Rng::stream(7, "data", &[1, 2]);
        let mut b = Rng::stream(7, "data", &[2, 1]);
        let mut c = Rng::stream(7, "init", &[1, 2]);
        let first = a.next_u64();
        assert_eq!(first, a2.next_u64());
        assert_ne!(first, b.next_u64());
        assert_ne!(first, c.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let v: f64 = rng.uniform(-2.0, 5.0);
            assert!((-2.0..5.0).contains(&v));
        }
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut rng = Rng::new(11);
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[rng.below(7) as usize] += 1;
        }
        for &c in &counts {
            assert!((8_000..12_000).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(5);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn choose_k_distinct() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let picks = rng.choose_k(10, 4);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "{picks:?}");
        }
    }
}
