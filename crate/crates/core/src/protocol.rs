//! Seeded start points for repeated runs.
//!
//! Generator: ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), normal
//! draws via `rand_distr::StandardNormal` (ziggurat). The perturbation is drawn
//! for `x` first, then `y`, one coordinate at a time. Equal seeds give equal
//! starts within a build; agreement across languages is not attempted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::problem::BilevelProblem;

/// Perturbation size applied to the default start.
pub const START_SCALE: f64 = 0.01;

/// Seed for repetition `rep` of `problem` under a run seed.
///
/// FNV-1a over the problem name, folded with the seed and repetition and
/// passed through the SplitMix64 finalizer, so each (problem, rep) pair gets
/// an independent stream regardless of batch order.
pub fn derive_seed(seed: u64, problem: &str, rep: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in problem.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h ^ splitmix(rep as u64)))
}

fn splitmix(v: u64) -> u64 {
    let mut z = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `(x₀, y₀) = (x̃₀, ỹ₀) + scale·(ξ_x, ξ_y)` with standard normal `ξ`.
pub fn perturbed_start(prob: &BilevelProblem, seed: u64, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = prob.default_start();
    let mut draw = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|c| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                c + scale * xi
            })
            .collect()
    };
    let x = draw(x0);
    let y = draw(y0);
    (x, y)
}
