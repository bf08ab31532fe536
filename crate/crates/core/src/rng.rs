//! Deterministic random streams.
//!
//! Every stochastic consumer (weight init, input noise, measurement noise)
//! draws from its own ChaCha8 stream derived from `(seed, role)`. Separating
//! the streams keeps draws independent of evaluation order: disabling the
//! discriminator, for example, must not shift the noise the generator sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Who is drawing. Each role maps to a fixed ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    GeneratorInit,
    DiscriminatorInit,
    InputNoise,
    MeasurementNoise,
}

impl Role {
    fn stream_id(self) -> u64 {
        match self {
            Role::GeneratorInit => 1,
            Role::DiscriminatorInit => 2,
            Role::InputNoise => 3,
            Role::MeasurementNoise => 4,
        }
    }
}

/// An RNG for one `(seed, role)` pair. Same pair, same draws, always.
pub fn stream(seed: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.stream_id());
    rng
}

/// Per-channel seed for multi-channel runs: channel `i` uses `base + i`.
pub fn channel_seed(base_seed: u64, channel: usize) -> u64 {
    base_seed.wrapping_add(channel as u64)
}
