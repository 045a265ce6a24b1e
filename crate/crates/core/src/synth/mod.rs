//! Synthetic scenes with ground truth, perturbations, and oracles that check
//! the closed-form solver through independent routes.

mod oracle;
pub(crate) mod scene;

pub use oracle::{
    finite_diff_grad, finite_diff_grad_raw, geometric_refine, gradient_check, oracle_minimize,
    random_gradcheck_case, relative_error, GradCheck, OracleSolution, GRADIENT_FLOOR,
};
pub use scene::{gen_scene, perturb, rectify_scene, PerturbSpec, Scene, SceneConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator behind every seeded sampler in this crate.
pub type SceneRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SceneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
