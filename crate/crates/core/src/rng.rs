//! Deterministic, label-addressed random streams.
//!
//! Every random quantity in a run (device selection, mini-batches, dithers,
//! fading, noise) is drawn from its own stream, keyed by the master seed and a
//! tuple of labels. Two parties that agree on the key regenerate the same
//! stream without exchanging anything, which is how the server recovers the
//! per-round dither.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator behind every stream.
pub type RngStream = ChaCha8Rng;

/// One component of a stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Int(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Int(v as u64)
    }
}

const DOMAIN: &[u8] = b"ncairfl/stream/v1";

fn key_digest(master_seed: u64, labels: &[Label<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(DOMAIN);
    hasher.update(master_seed.to_le_bytes());
    hasher.update((labels.len() as u64).to_le_bytes());
    // Tag + length prefix keeps ("ab","c") distinct from ("a","bc").
    for label in labels {
        match label {
            Label::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Label::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let out = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&out);
    seed
}

/// Derives the stream for `(master_seed, labels)`.
pub fn derive_stream(master_seed: u64, labels: &[Label<'_>]) -> RngStream {
    ChaCha8Rng::from_seed(key_digest(master_seed, labels))
}

/// Derives a child seed, e.g. the per-trial master seed.
pub fn derive_seed(master_seed: u64, labels: &[Label<'_>]) -> u64 {
    let digest = key_digest(master_seed, labels);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Builds a label slice inline: `labels!["batch", round, device]`.
#[macro_export]
macro_rules! labels {
    ($($x:expr),* $(,)?) => {
        [$($crate::rng::Label::from($x)),*]
    };
}
