//! Reproducible random streams.
//!
//! Every stream is addressed by `(seed, domain, index)`: the seed and domain
//! pick a ChaCha8 key and the index selects the cipher stream, so trajectory
//! `k` sees the same numbers no matter how many other trajectories run or in
//! which order. Normals come from the inverse CDF of 53-bit uniforms, which
//! keeps them bit-identical across platforms that share `f64` semantics.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

/// Separates streams drawn for different purposes from the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Trajectory = 1,
    Bootstrap = 2,
    Sampling = 3,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, domain: Domain, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain as u64)));
        rng.set_stream(index);
        Stream { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * self.uniform())
    }

    /// Uniform index in `0..n` by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for o in out {
            *o = self.normal();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn streams_are_independent_of_each_other() {
        let a: Vec<u64> = (0..4).map(|_| Stream::new(7, Domain::Trajectory, 3).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut s3 = Stream::new(7, Domain::Trajectory, 3);
        let mut s4 = Stream::new(7, Domain::Trajectory, 4);
        let mut b = Stream::new(7, Domain::Bootstrap, 3);
        let x = s3.next_u64();
        assert_ne!(x, s4.next_u64());
        assert_ne!(x, b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(1, Domain::Sampling, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "{mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "{var}");
        let tail = xs.iter().filter(|x| **x > 1.959_963_984_540_054).count() as f64 / n as f64;
        assert!((tail - 0.025).abs() < 5.0 * (0.025 * 0.975 / n as f64).sqrt(), "{tail}");
    }

    #[test]
    fn inverse_cdf_matches_known_quantiles() {
        for (p, z) in [(0.5, 0.0), (0.975, 1.959_963_984_540_054), (0.841_344_746_068_542_9, 1.0)] {
            let got = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
            assert!((got - z).abs() < 1e-9, "{p}: {got}");
        }
    }

    proptest! {
        #[test]
        fn uniform_stays_open(seed in any::<u64>(), idx in 0u64..1000) {
            let mut s = Stream::new(seed, Domain::Trajectory, idx);
            for _ in 0..64 {
                let u = s.uniform();
                prop_assert!(u > 0.0 && u < 1.0);
                prop_assert!(s.normal().is_finite());
            }
        }

        #[test]
        fn below_is_in_range(seed in any::<u64>(), n in 1usize..50) {
            let mut s = Stream::new(seed, Domain::Bootstrap, 0);
            for _ in 0..32 {
                prop_assert!(s.below(n) < n);
            }
        }
    }
}
