//! Keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, stream, a, b)`, e.g. `(seed, Stream::Mask, utterance, step)`.
//! Streams are independent of evaluation order, so parallel workers and
//! sequential runs draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KeyedRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Corpus = 2,
    Batch = 3,
    Mask = 4,
    Gumbel = 5,
    Distractor = 6,
    FrameSelect = 7,
    Analysis = 8,
    Test = 9,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn keyed(seed: u64, stream: Stream, a: u64, b: u64) -> KeyedRng {
    let mut state = seed;
    let mut mix = splitmix64(&mut state);
    for word in [stream as u64, a, b] {
        state ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        mix ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).wrapping_add(mix).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
