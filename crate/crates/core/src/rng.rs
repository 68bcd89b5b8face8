//! Counter-based random streams.
//!
//! Every draw in the crate comes from a stream keyed by
//! `(global seed, sample index, role)`, so a sample's randomness does not
//! depend on batch position, worker count or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct roles never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    UePosition,
    Channel,
    Noise,
    Theta,
    Init,
    Fingerprint,
    Custom(u32),
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::UePosition => 1,
            Role::Channel => 2,
            Role::Noise => 3,
            Role::Theta => 4,
            Role::Init => 5,
            Role::Fingerprint => 6,
            Role::Custom(k) => 0x100 + k as u64,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, index, role)`.
pub fn stream(seed: u64, index: u64, role: Role) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed) ^ role.tag().wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. one evaluation seed per SNR point.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
