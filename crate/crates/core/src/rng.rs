use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Independent deterministic stream for one consumer of the run seed.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    (0..len).map(|_| normal.sample(rng)).collect()
}

// Stream ids, one per consumer.
pub(crate) const BANK_TOKENS: u64 = 1;
pub(crate) const BANK_CONTEXT: u64 = 2;
pub(crate) const PROJECTION: u64 = 3;
pub(crate) const ADAPTER: u64 = 4;
pub(crate) const SHUFFLE_STAGE1: u64 = 5;
pub(crate) const SHUFFLE_STAGE2: u64 = 6;
pub(crate) const SYNTH_MEANS: u64 = 7;
pub(crate) const SYNTH_NOISE: u64 = 8;
pub(crate) const SYNTH_SPLIT: u64 = 9;
pub(crate) const OVERSAMPLE: u64 = 10;
pub(crate) const BASELINE: u64 = 11;
pub(crate) const DISTORTION: u64 = 12;
pub(crate) const FD_INSTANCES: u64 = 13;
