//! Seeded, splittable random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream addressed by
//! `(master_seed, stream_id)`. ChaCha is counter based, so two streams with
//! different ids never overlap and a stream can be recreated at any time from
//! its address alone. Stream ids are derived from structured keys with
//! [`stream_id`], which keeps parallel rollouts reproducible regardless of the
//! order in which they run.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Domain tags for [`stream_id`]; keeps the id spaces of unrelated consumers apart.
pub mod domain {
    pub const SCENE: u64 = 1;
    pub const FM_BATCH: u64 = 2;
    pub const FM_NOISE: u64 = 3;
    pub const INIT_NOISE: u64 = 4;
    pub const STEP_NOISE: u64 = 5;
    pub const MATTING: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const PARAM_INIT: u64 = 8;
    pub const DATA_ORDER: u64 = 9;
    pub const EVAL_NOISE: u64 = 10;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a structured key into a single stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_F10A_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// One independent random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Shorthand for `RngStream::new(seed, stream_id(parts))`.
    pub fn keyed(master_seed: u64, parts: &[u64]) -> Self {
        Self::new(master_seed, stream_id(parts))
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample::<f32, _>(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i as i64) as usize;
            items.swap(i, j);
        }
    }
}

/// Standard normal tensor drawn from `stream`.
pub fn gaussian_sample(shape: &[usize], stream: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| stream.normal()).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape product matches length")
}
