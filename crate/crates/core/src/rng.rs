//! Keyed random streams.
//!
//! Every stream is a ChaCha12 keystream whose key is the SHA-256 digest of
//! `(base, seed_index, purpose)`. Streams never share state, so adding runs
//! or purposes leaves existing draws untouched, and the draw a run sees
//! does not depend on which thread runs it.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha12Rng;

/// Purpose tag for the per-run ODE seed `ε*`. Shared by every variant so
/// runs with the same seed index are paired.
pub const EPS_STAR: &str = "eps_star";

pub fn stream(base: u64, seed_index: u64, purpose: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(b"distill-lab/stream/v1");
    h.update(base.to_le_bytes());
    h.update(seed_index.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(key)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// The prior draw `ε*` for one seed index.
pub fn eps_star(base: u64, seed_index: u64, dim: usize) -> DVector<f64> {
    standard_normal(&mut stream(base, seed_index, EPS_STAR), dim)
}
