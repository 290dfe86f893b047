//! Seeded random streams.
//!
//! One integer seed fans out into independent ChaCha8 streams, one per
//! consumer, so that adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type StreamRng = ChaCha8Rng;

/// Named stream identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Buffer = 3,
    Contrast = 4,
    Synthetic = 5,
    Shuffle = 6,
    Metrics = 7,
    Extractor = 8,
}

/// RNG for `stream` under `seed`. Zero is an ordinary seed.
pub fn stream(seed: u64, s: Stream) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

/// RNG for `stream` under `seed`, further keyed by `index` (e.g. an epoch).
pub fn keyed(seed: u64, s: Stream, index: u64) -> StreamRng {
    let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    stream(mixed, s)
}

/// All streams a training run draws from.
#[derive(Clone, Debug)]
pub struct SeedBank {
    pub seed: u64,
    pub init: StreamRng,
    pub data: StreamRng,
    pub buffer: StreamRng,
    pub contrast: StreamRng,
}

/// Make every stochastic draw of a run reproducible from `seed`.
pub fn seed_all(seed: u64) -> SeedBank {
    SeedBank {
        seed,
        init: stream(seed, Stream::Init),
        data: stream(seed, Stream::Data),
        buffer: stream(seed, Stream::Buffer),
        contrast: stream(seed, Stream::Contrast),
    }
}

/// Exact generator position as seven words: seed (4), stream, word position (2).
pub fn save_state(r: &StreamRng) -> Vec<u64> {
    let seed = r.get_seed();
    let mut out: Vec<u64> = seed
        .chunks(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    out.push(r.get_stream());
    let pos = r.get_word_pos();
    out.push(pos as u64);
    out.push((pos >> 64) as u64);
    out
}

pub fn load_state(words: &[u64]) -> Result<StreamRng> {
    if words.len() != 7 {
        return Err(Error::Checkpoint(format!(
            "rng state needs 7 words, got {}",
            words.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(words[4]);
    r.set_word_pos(words[5] as u128 | ((words[6] as u128) << 64));
    Ok(r)
}
