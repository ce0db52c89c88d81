//! Seed derivation and deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream whose 256-bit key is
//! a SHA-256 digest of `(master seed, tag, index)`. Replica `i` of any
//! experiment therefore sees the same numbers whatever the worker count.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn digest(master: u128, tag: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Child seed for replica `index` of the component named `tag`.
pub fn derive_seed(master: u128, tag: &str, index: u64) -> u128 {
    let d = digest(master, tag, index);
    u128::from_le_bytes(d[..16].try_into().unwrap())
}

/// Independent random stream for replica `index` of the component named `tag`.
pub fn stream(master: u128, tag: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(digest(master, tag, index))
}

/// A 128-bit master seed. Serialized as a number when it fits in 64 bits and
/// as a decimal string otherwise; accepts numbers or decimal / `0x`-prefixed
/// hex strings on input.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Seed(pub u128);

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Seed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(hex) => u128::from_str_radix(hex, 16),
            None => s.parse::<u128>(),
        };
        parsed.map(Seed).map_err(|e| format!("invalid seed {s:?}: {e}"))
    }
}

impl Serialize for Seed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match u64::try_from(self.0) {
            Ok(v) => s.serialize_u64(v),
            Err(_) => s.serialize_str(&self.0.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Seed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SeedVisitor;
        impl Visitor<'_> for SeedVisitor {
            type Value = Seed;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or an integer string")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Seed, E> {
                Ok(Seed(v as u128))
            }
            fn visit_u128<E: de::Error>(self, v: u128) -> Result<Seed, E> {
                Ok(Seed(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Seed, E> {
                u128::try_from(v).map(Seed).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Seed, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(SeedVisitor)
    }
}
