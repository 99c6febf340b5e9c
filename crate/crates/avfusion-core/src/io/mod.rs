//! File formats: tensor containers, WAV audio, checkpoints.

pub mod checkpoint;
pub mod detections;
pub mod tnsr;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{AvError, Result};

/// FNV-1a, used for config hashes in reproducibility stanzas.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Written alongside every pipeline output: enough to rerun the command and
/// get the same bytes. Deliberately free of timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproStanza {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl ReproStanza {
    pub fn new(seed: u64, config_hash: u64) -> ReproStanza {
        ReproStanza {
            seed,
            config_hash: format!("{config_hash:016x}"),
            version: crate::VERSION.to_string(),
        }
    }

    /// Stanza whose hash covers the JSON form of any serializable config.
    pub fn for_config<C: Serialize>(seed: u64, config: &C) -> Result<ReproStanza> {
        let json = serde_json::to_vec(config)
            .map_err(|e| AvError::Format(format!("config serialization: {e}")))?;
        Ok(ReproStanza::new(seed, fnv1a64(&json)))
    }
}
