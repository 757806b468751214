//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdlg_core::{Acts, BitLanes, NodeInit, SoftLogicLayer};

pub fn soft_layer(in_dim: usize, width: usize, seed: u64) -> SoftLogicLayer {
    SoftLogicLayer::new(in_dim, width, seed, seed + 1, NodeInit::Gaussian { sigma: 1.0 }).expect("valid layer")
}

/// Uniform activations in `[0, 1)`, feature-major.
pub fn soft_inputs(dim: usize, batch: usize, seed: u64) -> Acts {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Acts::from_feature_major(dim, batch, (0..dim * batch).map(|_| r.random::<f64>()).collect())
}

pub fn bit_inputs(dim: usize, lanes: usize, seed: u64) -> BitLanes {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let lanes: Vec<Vec<bool>> = (0..lanes).map(|_| (0..dim).map(|_| r.random()).collect()).collect();
    BitLanes::from_lanes(&lanes).expect("non-empty lanes")
}
