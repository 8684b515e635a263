//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pointaugment::dataio::generate_synthetic;
use pointaugment::{Dataset, SynthConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A balanced four-class dataset with `per_class` training clouds of `n` points.
pub fn dataset(per_class: usize, n: usize) -> Dataset {
    let mut cfg = SynthConfig::desk_scale();
    cfg.train_counts = vec![per_class; 4];
    cfg.test_counts = vec![1; 4];
    cfg.n_points = n;
    generate_synthetic(&cfg, 0).expect("valid synthetic config")
}
