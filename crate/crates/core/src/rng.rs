//! Seed splitting.
//!
//! Every random draw descends from one 64-bit run seed. A stream is a ChaCha8
//! generator keyed by that seed with a 64-bit stream id:
//!
//! ```text
//! stream id = purpose (8 bits) << 56 | a (28 bits) << 28 | b (28 bits)
//! ```
//!
//! where `(a, b)` is `(epoch, iteration)` for training batches, `(trial, 0)`
//! for evaluation trials and `(0, 0)` for one-shot uses. Streams never
//! overlap, so logs can name each one by `purpose/a/b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Synth = 2,
    Batch = 3,
    Trial = 4,
    Mix = 5,
    Probe = 6,
}

pub fn stream_id(purpose: Purpose, a: u64, b: u64) -> u64 {
    const MASK: u64 = (1 << 28) - 1;
    ((purpose as u64) << 56) | ((a & MASK) << 28) | (b & MASK)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, a, b));
    rng
}
