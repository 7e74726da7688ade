//! Counter-keyed random streams.
//!
//! A stream is identified by `(seed, agent, purpose, round)`. The identifier is
//! hashed with SplitMix64 into a ChaCha8 key, so a draw never depends on how
//! many other draws happened before it or on which thread performed them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::AgentId;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Topology,
    ByzantineAssignment,
    Subsample,
    Partition,
    SyntheticData,
    SampleIndex,
    LsvrgCoin,
    Attack,
    Probe,
    ShadowSample,
    /// Derivation of the per-component seeds from the master seed.
    SeedDerivation,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Topology => 1,
            Purpose::ByzantineAssignment => 2,
            Purpose::Subsample => 3,
            Purpose::Partition => 4,
            Purpose::SyntheticData => 5,
            Purpose::SampleIndex => 6,
            Purpose::LsvrgCoin => 7,
            Purpose::Attack => 8,
            Purpose::Probe => 9,
            Purpose::ShadowSample => 10,
            Purpose::SeedDerivation => 11,
        }
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifier of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub agent: u64,
    pub purpose: Purpose,
    pub round: u64,
}

impl RngStream {
    pub fn new(seed: u64, agent: AgentId, purpose: Purpose, round: u64) -> Self {
        Self {
            seed,
            agent: agent as u64,
            purpose,
            round,
        }
    }

    /// Stream not tied to a particular agent or round.
    pub fn global(seed: u64, purpose: Purpose) -> Self {
        Self::new(seed, usize::MAX, purpose, 0)
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.seed;
        let mut mix = splitmix64(&mut state);
        for word in [self.agent, self.purpose.tag(), self.round] {
            state ^= word.wrapping_add(mix);
            mix = splitmix64(&mut state);
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }

    /// A derived 64-bit seed, used to expand a master seed into component seeds.
    pub fn derive_seed(&self) -> u64 {
        let key = self.key();
        u64::from_le_bytes(key[..8].try_into().expect("8-byte slice"))
    }
}
