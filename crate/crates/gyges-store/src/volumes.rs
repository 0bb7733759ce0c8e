//! Virtual logical volumes: naming, the persistent volume table, and the
//! fill-to-full accounting state.
//!
//! Hidden volume names are derived from the password: the first `b` hex
//! characters of SHA-256(password ∥ salt). Nothing in the table links a name
//! back to a password; without the password the correct name cannot be
//! found, so a wrong password and a nonexistent volume are the same
//! observable outcome.
//!
//! The table lives in the pool's volume-table region (byte-exact layout in
//! `FORMAT.md`): a header sector carrying the level-0 fill accounting and
//! the outer committed-bytes watermark, followed by packed 96-byte entries
//! of `{name, kind tag, labeled capacity}`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::thin_pool::{VolumeId, VOLUME_TABLE_BYTES};

/// Default trim length `b`: 16 hex characters (64 bits of the digest).
pub const NAME_TRIM_DEFAULT: usize = 16;
/// Reserved name of the outer volume.
pub const OUTER_NAME: &str = "outer";
/// Reserved name of the level-0 null sink pseudo-volume.
pub const NULL_SINK_NAME: &str = "null";

const TABLE_MAGIC: &[u8; 8] = b"GYGSVT1\0";
const ENTRY_SIZE: usize = 96;
const ENTRIES_OFFSET: usize = 512;
/// Maximum persisted volumes (outer + hidden).
pub const MAX_VOLUMES: usize = (VOLUME_TABLE_BYTES - ENTRIES_OFFSET) / ENTRY_SIZE;

/// Derive a hidden volume name: first `b` hex characters of
/// SHA-256(password ∥ salt). Deterministic; `b` must be in [8, 64].
pub fn derive_volume_name(password: &[u8], salt: &[u8], b: usize) -> Result<String> {
    if password.is_empty() {
        return Err(Error::EmptyPassword);
    }
    if !(8..=64).contains(&b) {
        return Err(Error::BadTrimLength(b));
    }
    let mut h = Sha256::new();
    h.update(password);
    h.update(salt);
    let hex = hex::encode(h.finalize());
    Ok(hex[..b].to_string())
}

/// Per-volume data key: SHA-256(password ∥ salt ∥ "key") truncated to 16
/// bytes. Hidden volume payloads are encrypted under this key before they
/// reach the pool.
pub fn derive_volume_key(password: &[u8], salt: &[u8]) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(password);
    h.update(salt);
    h.update(b"key");
    let digest = h.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    key
}

/// Stable volume identifier: first 16 bytes of SHA-256 of the name.
pub fn volume_id_for(name: &str) -> VolumeId {
    let digest = Sha256::digest(name.as_bytes());
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    VolumeId(id)
}

/// Volume flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Outer,
    Hidden,
    NullSink,
}

impl VolumeKind {
    fn tag(self) -> u8 {
        match self {
            VolumeKind::Outer => 1,
            VolumeKind::Hidden => 2,
            VolumeKind::NullSink => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(VolumeKind::Outer),
            2 => Some(VolumeKind::Hidden),
            _ => None,
        }
    }
}

/// One persisted volume table entry. The deniability level is a user-side
/// notion and is intentionally not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeEntry {
    pub name: String,
    pub kind: VolumeKind,
    pub labeled_capacity: u64,
}

/// Level-0 fill-to-full accounting.
///
/// `recorded` only grows while engaged; the full-storage condition fires
/// exactly when `used_before + recorded` reaches the outer volume's labeled
/// capacity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FillAccounting {
    pub engaged: bool,
    pub used_before: u64,
    pub recorded: u64,
}

impl FillAccounting {
    /// Bytes still accepted before the full-storage error, given the outer
    /// label.
    pub fn remaining(&self, label: u64) -> u64 {
        label.saturating_sub(self.used_before + self.recorded)
    }
}

/// In-memory mirror of the volume table region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VolumeTable {
    pub entries: Vec<VolumeEntry>,
    pub fill: FillAccounting,
    /// High-water mark of outer write ends: the "used capacity" snapshot
    /// source for level-0 engagement.
    pub outer_committed: u64,
}

impl VolumeTable {
    pub fn outer(&self) -> Option<&VolumeEntry> {
        self.entries.iter().find(|e| e.kind == VolumeKind::Outer)
    }

    pub fn find(&self, name: &str) -> Option<&VolumeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Serialize the header fields into the first table sector.
    pub fn header_bytes(&self) -> [u8; 512] {
        let mut out = [0u8; 512];
        out[0..8].copy_from_slice(TABLE_MAGIC);
        out[8] = self.fill.engaged as u8;
        out[16..24].copy_from_slice(&self.fill.used_before.to_le_bytes());
        out[24..32].copy_from_slice(&self.fill.recorded.to_le_bytes());
        out[32..40].copy_from_slice(&self.outer_committed.to_le_bytes());
        out[40..48].copy_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> [u8; VOLUME_TABLE_BYTES] {
        let mut out = [0u8; VOLUME_TABLE_BYTES];
        out[..512].copy_from_slice(&self.header_bytes());
        for (i, e) in self.entries.iter().enumerate() {
            let at = ENTRIES_OFFSET + i * ENTRY_SIZE;
            let name = e.name.as_bytes();
            debug_assert!(name.len() <= 64);
            out[at] = name.len() as u8;
            out[at + 1] = e.kind.tag();
            out[at + 8..at + 16].copy_from_slice(&e.labeled_capacity.to_le_bytes());
            out[at + 16..at + 16 + name.len()].copy_from_slice(name);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; VOLUME_TABLE_BYTES]) -> Result<Self> {
        if bytes[0..8] != *TABLE_MAGIC {
            return Err(Error::CorruptPool);
        }
        let engaged = match bytes[8] {
            0 => false,
            1 => true,
            _ => return Err(Error::CorruptPool),
        };
        let used_before = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let recorded = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let outer_committed = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[40..48].try_into().unwrap()) as usize;
        if count > MAX_VOLUMES {
            return Err(Error::CorruptPool);
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let at = ENTRIES_OFFSET + i * ENTRY_SIZE;
            let name_len = bytes[at] as usize;
            if name_len > 64 {
                return Err(Error::CorruptPool);
            }
            let kind = VolumeKind::from_tag(bytes[at + 1]).ok_or(Error::CorruptPool)?;
            let labeled_capacity = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap());
            let name = std::str::from_utf8(&bytes[at + 16..at + 16 + name_len])
                .map_err(|_| Error::CorruptPool)?
                .to_string();
            entries.push(VolumeEntry {
                name,
                kind,
                labeled_capacity,
            });
        }
        Ok(Self {
            entries,
            fill: FillAccounting {
                engaged,
                used_before,
                recorded,
            },
            outer_committed,
        })
    }
}
