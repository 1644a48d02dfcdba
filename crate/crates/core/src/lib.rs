//! Reflective preference optimization on small, exactly-enumerable
//! autoregressive policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`policy`] — the toy policy family, exact sequence probabilities and sampling.
//! * [`grad`] — analytic log-probability gradients and a finite-difference oracle.
//! * [`objectives`] — DPO and the compound RPO loss with analytic gradients.
//! * [`env`] — the synthetic factuality task and its critique oracle.
//! * [`pairgen`] — preference corpora under four pair-construction paradigms.
//! * [`diagnostics`] — pair KL, margins, log-prob histograms, gradient covariance.
//! * [`train`] — optimizers, hint pretraining and the training loop.
//! * [`certify`] — finite-difference certification of every loss gradient.
//! * [`experiment`] — configuration and the DPO-vs-RPO comparison driver.

pub mod certify;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod math;
pub mod objectives;
pub mod pairgen;
pub mod policy;
pub mod train;

pub use error::{Result, RpoError};

/// The generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha20Rng;

/// Build the crate's generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from `(seed, stream)`.
///
/// Plain `seed ^ stream` makes `(s, c)` and `(s ^ 1, c ^ 1)` collide, so
/// both halves go through splitmix64 first.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
