//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by any layer of the store.
///
/// Partial-progress variants ([`Error::FullStorage`], [`Error::PoolExhausted`])
/// carry the number of bytes accepted before the condition fired so callers
/// auditing write totals (the fill attack, benchmarks) can account exactly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("path already exists: {0}")]
    PathExists(PathBuf),
    #[error("capacity {0} is not a positive multiple of the sector size")]
    CapacityNotSectorAligned(u64),
    #[error("capacity {got} below minimum {min}")]
    CapacityTooSmall { got: u64, min: u64 },
    #[error("not a volume image (bad magic or version)")]
    BadImage,
    #[error("sector {sector} out of range (device has {count} sectors)")]
    OutOfRange { sector: u64, count: u64 },
    #[error("logical sector {0} is not covered by any mapping tuple")]
    UnmappedSector(u64),
    #[error("crypto footer already present")]
    FooterAlreadyPresent,
    #[error("bad password")]
    BadPassword,
    #[error("crypto footer missing or corrupt")]
    CorruptFooter,
    #[error("chunk size {0} must be a power of two in [4 KiB, 1 MiB]")]
    BadChunkSize(u64),
    #[error("device too small: {chunks} usable chunks, need at least {min}")]
    DeviceTooSmall { chunks: u64, min: u64 },
    #[error("pool metadata missing or corrupt")]
    CorruptPool,
    #[error("chunk already mapped for this volume")]
    AlreadyMapped,
    #[error("pool exhausted after {accepted} bytes accepted")]
    PoolExhausted { accepted: usize },
    #[error("storage full after {accepted} bytes accepted")]
    FullStorage { accepted: usize },
    #[error("outer volume already exists")]
    OuterExists,
    #[error("no outer volume")]
    NoOuterVolume,
    #[error("volume name collision")]
    NameCollision,
    #[error("deniability level must be at least 1 (level 0 is the null sink), got {0}")]
    BadLevel(u32),
    #[error("volume table full")]
    VolumeTableFull,
    #[error("name trim length {0} out of range [8, 64]")]
    BadTrimLength(usize),
    #[error("password must not be empty")]
    EmptyPassword,
    #[error("I/O range [{offset}, {offset}+{len}) exceeds labeled capacity {label}")]
    OutOfLabelRange { offset: u64, len: u64, label: u64 },
    #[error("invalid token")]
    InvalidToken,
    #[error("unknown volume")]
    UnknownVolume,
    #[error("volume already mounted")]
    AlreadyMounted,
    #[error("stale session handle")]
    StaleHandle,
    #[error("target is read-only")]
    TargetReadOnly,
    #[error("inconsistent inputs: reported capacity {reported} exceeds physical {physical}")]
    InconsistentInputs { physical: u64, reported: u64 },
    #[error("vlen must be at least 8 sectors, got {0}")]
    VlenTooSmall(u64),
    #[error("benchmark requires at least one trial")]
    ZeroTrials,
    #[error("benchmark target too small: need {need} bytes, have {have}")]
    TargetTooSmall { need: u64, have: u64 },
    #[error("benchmark readback verification failed at offset {0}")]
    ReadbackMismatch(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
