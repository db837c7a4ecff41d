//! Seeded randomness. Every consumer draws from its own named substream of a
//! single root seed so that, for example, changing the number of evaluation
//! episodes does not perturb the shift samples seen during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named substreams of the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    Sgnn,
    Policy,
    Inflow,
    Init,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Env => 0x656e_76,
            Stream::Sgnn => 0x7367_6e6e,
            Stream::Policy => 0x706f_6c69,
            Stream::Inflow => 0x696e_666c,
            Stream::Init => 0x696e_6974,
            Stream::Eval => 0x6576_616c,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(root, stream, index)`.
pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream.tag())) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(root: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, stream, index))
}
