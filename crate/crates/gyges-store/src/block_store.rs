//! Sector-addressed physical volume backed by an image file.
//!
//! Image layout (byte-exact description in `FORMAT.md`):
//!
//! ```text
//! ┌──────────────────────────┐ 0
//! │ plaintext header (4 KiB) │ magic, capacity, version, footer pointer
//! ├──────────────────────────┤ 4096
//! │ data region              │ capacity_bytes, sector-addressed
//! ├──────────────────────────┤ 4096 + capacity
//! │ crypto footer (4 KiB)    │ written by the encryption layer
//! └──────────────────────────┘
//! ```
//!
//! The data region is created sparse; capacity accounting always uses the
//! logical size. Sectors that were never written read back as zeros.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed sector size, matching the device-mapper convention.
pub const SECTOR_SIZE: usize = 512;
/// Plaintext image header size.
pub const HEADER_SIZE: u64 = 4096;
/// Reserved crypto footer size at the image tail.
pub const FOOTER_SIZE: u64 = 4096;
/// Minimum data-region capacity accepted at creation.
pub const MIN_CAPACITY: u64 = 1024 * 1024;

const MAGIC: &[u8; 6] = b"GYGS1\0";
const FORMAT_VERSION: u32 = 1;

/// A 512-byte sector buffer.
pub type SectorBuf = [u8; SECTOR_SIZE];

/// File-backed raw device with a fixed capacity.
#[derive(Debug)]
pub struct PhysicalVolume {
    file: File,
    path: PathBuf,
    capacity_bytes: u64,
}

impl PhysicalVolume {
    /// Create a fresh image at `path` with the given data capacity.
    ///
    /// The capacity must be a multiple of the sector size and at least
    /// [`MIN_CAPACITY`]. The data region is allocated sparse.
    pub fn create(path: &Path, capacity_bytes: u64) -> Result<Self> {
        if capacity_bytes == 0 || capacity_bytes % SECTOR_SIZE as u64 != 0 {
            return Err(Error::CapacityNotSectorAligned(capacity_bytes));
        }
        if capacity_bytes < MIN_CAPACITY {
            return Err(Error::CapacityTooSmall {
                got: capacity_bytes,
                min: MIN_CAPACITY,
            });
        }
        if path.exists() {
            return Err(Error::PathExists(path.to_path_buf()));
        }

        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)?;
        file.set_len(HEADER_SIZE + capacity_bytes + FOOTER_SIZE)?;

        let mut header = [0u8; HEADER_SIZE as usize];
        header[0..6].copy_from_slice(MAGIC);
        header[8..16].copy_from_slice(&capacity_bytes.to_le_bytes());
        header[16..20].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        let footer_offset = HEADER_SIZE + capacity_bytes;
        header[24..32].copy_from_slice(&footer_offset.to_le_bytes());
        file.write_all_at(&header, 0)?;
        file.sync_all()?;

        Ok(Self {
            file,
            path: path.to_path_buf(),
            capacity_bytes,
        })
    }

    /// Open an existing image, validating magic and version.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut header = [0u8; 32];
        file.read_exact_at(&mut header, 0)?;
        if &header[0..6] != MAGIC {
            return Err(Error::BadImage);
        }
        let capacity_bytes = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let version = u32::from_le_bytes(header[16..20].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadImage);
        }
        if capacity_bytes == 0 || capacity_bytes % SECTOR_SIZE as u64 != 0 {
            return Err(Error::BadImage);
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
            capacity_bytes,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Data-region capacity in bytes (the physical capacity `C_p`).
    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Number of addressable sectors.
    pub fn sector_count(&self) -> u64 {
        self.capacity_bytes / SECTOR_SIZE as u64
    }

    fn check_range(&self, sector: u64) -> Result<()> {
        let count = self.sector_count();
        if sector >= count {
            return Err(Error::OutOfRange { sector, count });
        }
        Ok(())
    }

    /// Read one sector. Never-written sectors read as zeros.
    pub fn read_sector(&self, sector: u64, buf: &mut SectorBuf) -> Result<()> {
        self.check_range(sector)?;
        let off = HEADER_SIZE + sector * SECTOR_SIZE as u64;
        self.file.read_exact_at(buf, off)?;
        Ok(())
    }

    /// Write one sector.
    pub fn write_sector(&self, sector: u64, buf: &SectorBuf) -> Result<()> {
        self.check_range(sector)?;
        let off = HEADER_SIZE + sector * SECTOR_SIZE as u64;
        self.file.write_all_at(buf, off)?;
        Ok(())
    }

    fn check_run(&self, first: u64, len_bytes: usize) -> Result<()> {
        debug_assert_eq!(len_bytes % SECTOR_SIZE, 0);
        let sectors = (len_bytes / SECTOR_SIZE) as u64;
        let count = self.sector_count();
        if first >= count || sectors > count - first {
            return Err(Error::OutOfRange {
                sector: first + sectors.saturating_sub(1),
                count,
            });
        }
        Ok(())
    }

    /// Read a contiguous sector run in one IO. `buf` length must be a
    /// multiple of the sector size.
    pub fn read_sectors(&self, first: u64, buf: &mut [u8]) -> Result<()> {
        self.check_run(first, buf.len())?;
        let off = HEADER_SIZE + first * SECTOR_SIZE as u64;
        self.file.read_exact_at(buf, off)?;
        Ok(())
    }

    /// Write a contiguous sector run in one IO. `data` length must be a
    /// multiple of the sector size.
    pub fn write_sectors(&self, first: u64, data: &[u8]) -> Result<()> {
        self.check_run(first, data.len())?;
        let off = HEADER_SIZE + first * SECTOR_SIZE as u64;
        self.file.write_all_at(data, off)?;
        Ok(())
    }

    /// Read the raw footer region (used by the encryption layer only).
    pub(crate) fn read_footer_region(&self, buf: &mut [u8; FOOTER_SIZE as usize]) -> Result<()> {
        self.file.read_exact_at(buf, HEADER_SIZE + self.capacity_bytes)?;
        Ok(())
    }

    /// Write the raw footer region (used by the encryption layer only).
    pub(crate) fn write_footer_region(&self, buf: &[u8; FOOTER_SIZE as usize]) -> Result<()> {
        self.file.write_all_at(buf, HEADER_SIZE + self.capacity_bytes)?;
        Ok(())
    }

    /// Flush file contents and metadata to stable storage.
    pub fn sync(&self) -> Result<()> {
        self.file.sync_all()?;
        Ok(())
    }

    /// Byte-scan of the entire raw image (header, data, footer).
    ///
    /// Forensic helper for tests and the adversary harness: returns the
    /// offset of the first occurrence of `needle`, if any.
    pub fn scan_raw(&self, needle: &[u8]) -> Result<Option<u64>> {
        if needle.is_empty() {
            return Ok(Some(0));
        }
        let total = HEADER_SIZE + self.capacity_bytes + FOOTER_SIZE;
        let chunk = 1 << 20;
        let overlap = needle.len() - 1;
        let mut buf = vec![0u8; chunk + overlap];
        let mut pos = 0u64;
        while pos < total {
            let want = ((total - pos) as usize).min(chunk + overlap);
            self.file.read_exact_at(&mut buf[..want], pos)?;
            if let Some(i) = find_subslice(&buf[..want], needle) {
                return Ok(Some(pos + i as u64));
            }
            if pos + want as u64 >= total {
                break;
            }
            pos += (want - overlap) as u64;
        }
        Ok(None)
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    let first = needle[0];
    let mut start = 0;
    while let Some(i) = haystack[start..haystack.len() - needle.len() + 1]
        .iter()
        .position(|&b| b == first)
    {
        let at = start + i;
        if &haystack[at..at + needle.len()] == needle {
            return Some(at);
        }
        start = at + 1;
    }
    None
}

/// Identifier of a mapped target device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceId(pub u32);

/// How a mapping tuple redirects IO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingType {
    Linear,
    Thin,
    Null,
}

/// One device-mapping entry: logical range → (device, physical offset).
///
/// For [`MappingType::Null`], `target_device` and `physical_offset_sectors`
/// are ignored on resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingTuple {
    pub logical_offset_sectors: u64,
    pub length_sectors: u64,
    pub mapping_type: MappingType,
    pub target_device: DeviceId,
    pub physical_offset_sectors: u64,
}

/// Result of resolving a logical sector through a mapping table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Device { device: DeviceId, sector: u64 },
    NullSink,
}

/// Translate `logical_sector` through an ordered, disjoint tuple list.
///
/// Pure function of its inputs. Returns [`Error::UnmappedSector`] when no
/// tuple covers the sector.
pub fn resolve_mapping(tuples: &[MappingTuple], logical_sector: u64) -> Result<Resolution> {
    for t in tuples {
        debug_assert!(t.length_sectors > 0);
        let start = t.logical_offset_sectors;
        if logical_sector >= start && logical_sector - start < t.length_sectors {
            return Ok(match t.mapping_type {
                MappingType::Null => Resolution::NullSink,
                MappingType::Linear | MappingType::Thin => Resolution::Device {
                    device: t.target_device,
                    sector: logical_sector - start + t.physical_offset_sectors,
                },
            });
        }
    }
    Err(Error::UnmappedSector(logical_sector))
}
