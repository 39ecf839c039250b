//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the base seed and placed on
//! a 64-bit stream id packed from `(experiment, slot, n, index)`. Distinct
//! tuples map to distinct stream ids, so streams never overlap regardless of
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const EXPERIMENT_BITS: u32 = 12;
const SLOT_BITS: u32 = 12;
const N_BITS: u32 = 20;
const INDEX_BITS: u32 = 20;

/// Largest value accepted for the `n` component of a stream key.
pub const MAX_STREAM_N: u32 = (1 << N_BITS) - 1;
/// Largest value accepted for the `index` component of a stream key.
pub const MAX_STREAM_INDEX: u32 = (1 << INDEX_BITS) - 1;

/// Factory of independent generator streams sharing one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
    experiment: u16,
    slot: u16,
    n: u32,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            experiment: 0,
            slot: 0,
            n: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn experiment(self, experiment: u16) -> Self {
        assert!(u32::from(experiment) < (1 << EXPERIMENT_BITS), "experiment id out of range");
        Self { experiment, ..self }
    }

    pub fn slot(self, slot: u16) -> Self {
        assert!(u32::from(slot) < (1 << SLOT_BITS), "slot id out of range");
        Self { slot, ..self }
    }

    /// Slot `offset` positions past the current one.
    pub fn sub_slot(self, offset: u16) -> Self {
        self.slot(self.slot.checked_add(offset).expect("slot id out of range"))
    }

    pub fn slot_id(&self) -> u16 {
        self.slot
    }

    pub fn n(self, n: usize) -> Self {
        assert!(n <= MAX_STREAM_N as usize, "particle count out of stream range");
        Self { n: n as u32, ..self }
    }

    pub fn stream_id(&self, index: usize) -> u64 {
        assert!(index <= MAX_STREAM_INDEX as usize, "stream index out of range");
        (u64::from(self.experiment) << (SLOT_BITS + N_BITS + INDEX_BITS))
            | (u64::from(self.slot) << (N_BITS + INDEX_BITS))
            | (u64::from(self.n) << INDEX_BITS)
            | index as u64
    }

    /// Generator for the `index`-th stream under this prefix.
    pub fn rng(&self, index: usize) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id(index));
        rng
    }
}
