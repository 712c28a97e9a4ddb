//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssm_sgmcmc::models::simulate::simulate;
use ssm_sgmcmc::models::synthetic::{synthetic_star, SyntheticTag};
use ssm_sgmcmc::{ModelParams, ObservationSequence};

/// Reference parameters and a simulated sequence of length `t_len`.
pub fn fixture(tag: SyntheticTag, t_len: usize, seed: u64) -> (ModelParams, ObservationSequence) {
    let params = synthetic_star(tag);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = simulate(&params, t_len, &mut rng).expect("reference parameters simulate");
    (params, data.obs)
}
