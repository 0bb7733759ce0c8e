//! Thin-provisioned chunk pool over the encrypted device.
//!
//! The device's sector space is split into a metadata extent and a data
//! region of fixed-size chunks. Every chunk is owned by at most one
//! (volume, virtual chunk) pair; ownership records are written through to
//! the metadata extent before an allocation returns.
//!
//! On-device layout (sectors of the encrypted device, byte-exact in
//! `FORMAT.md`):
//!
//! ```text
//! sector 0            pool superblock: magic, version, chunk size, chunk count
//! sector 1            u64 record count (rest of sector reserved)
//! sectors 2 .. 2+R    packed 64-byte ownership records, 8 per sector
//! next 8 sectors      volume table region (managed by the volumes layer)
//! remaining sectors   data region: chunk i at data_start + i * (chunk_size/512)
//! ```
//!
//! The metadata sizing follows the 64-bytes-per-chunk rule: for a data
//! region of `n` chunks the accounted metadata size is exactly `n * 64`
//! bytes, and the pool chooses the largest `n` whose chunks plus metadata
//! extent fit the device.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::block_store::{SectorBuf, SECTOR_SIZE};
use crate::crypto::EncryptedDevice;
use crate::error::{Error, Result};

/// Default chunk size: 64 KiB.
pub const CHUNK_SIZE_DEFAULT: u64 = 64 * 1024;
/// Serialized ownership record size; also the per-chunk metadata budget.
pub const METADATA_RECORD_SIZE: usize = 64;
/// Volume table region size reserved inside the metadata extent.
pub const VOLUME_TABLE_BYTES: usize = 4096;
/// Minimum number of data chunks a pool must provide.
pub const MIN_CHUNKS: u64 = 16;

const POOL_MAGIC: &[u8; 8] = b"GYGSPL1\0";
const POOL_VERSION: u32 = 1;
const RECORDS_PER_SECTOR: u64 = (SECTOR_SIZE / METADATA_RECORD_SIZE) as u64;

/// 16-byte volume identifier. The all-zero id marks a free record slot and
/// is never a valid owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VolumeId(pub [u8; 16]);

impl VolumeId {
    pub const NIL: VolumeId = VolumeId([0u8; 16]);

    pub fn is_nil(&self) -> bool {
        self.0 == [0u8; 16]
    }
}

/// One persisted ownership record, padded to exactly 64 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetadataRecord {
    pub volume_id: VolumeId,
    pub virtual_chunk: u64,
    pub physical_chunk: u64,
}

impl MetadataRecord {
    pub fn to_bytes(&self) -> [u8; METADATA_RECORD_SIZE] {
        let mut out = [0u8; METADATA_RECORD_SIZE];
        out[0..16].copy_from_slice(&self.volume_id.0);
        out[16..24].copy_from_slice(&self.virtual_chunk.to_le_bytes());
        out[24..32].copy_from_slice(&self.physical_chunk.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut id = [0u8; 16];
        id.copy_from_slice(&bytes[0..16]);
        Self {
            volume_id: VolumeId(id),
            virtual_chunk: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            physical_chunk: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
        }
    }
}

/// Derived pool geometry for a device of `usable_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub chunk_size: u64,
    pub chunk_count: u64,
    /// Sectors holding packed records (after the count sector).
    pub record_sectors: u64,
    /// First sector of the volume table region.
    pub table_start_sector: u64,
    /// First sector of the data region.
    pub data_start_sector: u64,
}

impl PoolGeometry {
    /// Size of the data region in bytes.
    pub fn data_size_bytes(&self) -> u64 {
        self.chunk_count * self.chunk_size
    }

    /// Accounted metadata size: exactly 64 bytes per data chunk.
    pub fn metadata_size_bytes(&self) -> u64 {
        self.chunk_count * METADATA_RECORD_SIZE as u64
    }

    /// Storage utilization: data bytes over data plus metadata bytes.
    pub fn utilization(&self) -> f64 {
        let sp = self.data_size_bytes() as f64;
        let sm = self.metadata_size_bytes() as f64;
        sp / (sp + sm)
    }

    pub fn sectors_per_chunk(&self) -> u64 {
        self.chunk_size / SECTOR_SIZE as u64
    }
}

/// Metadata bytes for a data region of `data_bytes` at the given chunk size:
/// 64 bytes per chunk.
pub fn metadata_bytes_for(data_bytes: u64, chunk_size: u64) -> u64 {
    debug_assert_eq!(data_bytes % chunk_size, 0);
    data_bytes / chunk_size * METADATA_RECORD_SIZE as u64
}

fn valid_chunk_size(chunk_size: u64) -> bool {
    chunk_size.is_power_of_two() && (4096..=1024 * 1024).contains(&chunk_size)
}

fn sectors_for_bytes(bytes: u64) -> u64 {
    bytes.div_ceil(SECTOR_SIZE as u64)
}

/// Metadata extent size in sectors for an `n`-chunk pool: superblock,
/// count sector, record sectors, volume table.
fn metadata_extent_sectors(n: u64) -> u64 {
    let record_sectors = n.div_ceil(RECORDS_PER_SECTOR);
    1 + 1 + record_sectors + sectors_for_bytes(VOLUME_TABLE_BYTES as u64)
}

/// Compute the largest geometry that fits `usable_bytes`.
pub fn compute_geometry(usable_bytes: u64, chunk_size: u64) -> Result<PoolGeometry> {
    if !valid_chunk_size(chunk_size) {
        return Err(Error::BadChunkSize(chunk_size));
    }
    let sector = SECTOR_SIZE as u64;
    let total_sectors = usable_bytes / sector;
    let spc = chunk_size / sector;

    // Upper bound ignores metadata, then shrink until the extent fits too.
    let mut n = usable_bytes / chunk_size;
    while n > 0 && metadata_extent_sectors(n) + n * spc > total_sectors {
        n -= 1;
    }
    if n < MIN_CHUNKS {
        return Err(Error::DeviceTooSmall {
            chunks: n,
            min: MIN_CHUNKS,
        });
    }
    let record_sectors = n.div_ceil(RECORDS_PER_SECTOR);
    let table_start_sector = 2 + record_sectors;
    let data_start_sector = table_start_sector + sectors_for_bytes(VOLUME_TABLE_BYTES as u64);
    Ok(PoolGeometry {
        chunk_size,
        chunk_count: n,
        record_sectors,
        table_start_sector,
        data_start_sector,
    })
}

/// Best-fit selection: among free extents `(start, len)`, pick the smallest
/// one of length at least `needed` (extents considered from largest to
/// smallest, the last that still fits wins). Returns the extent index.
pub fn best_fit(extents: &[(u64, u64)], needed: u64) -> Option<usize> {
    let mut order: Vec<usize> = (0..extents.len()).collect();
    order.sort_by(|&a, &b| extents[b].1.cmp(&extents[a].1).then(extents[a].0.cmp(&extents[b].0)));
    order.into_iter().take_while(|&i| extents[i].1 >= needed).last()
}

/// Pool statistics snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolStats {
    pub total_chunks: u64,
    pub owned_chunks: u64,
    pub free_chunks: u64,
    pub eta: f64,
}

/// Chunk-granular resource pool with exclusive ownership.
pub struct ThinPool {
    dev: EncryptedDevice,
    geo: PoolGeometry,
    /// (volume, virtual chunk) → physical chunk.
    owner_map: BTreeMap<(VolumeId, u64), u64>,
    /// physical chunk → record slot index, for swap-remove on deallocate.
    slot_of_phys: HashMap<u64, u64>,
    /// Slot order mirror of the on-disk record array.
    slots: Vec<MetadataRecord>,
    free_set: BTreeSet<u64>,
}

impl std::fmt::Debug for ThinPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThinPool")
            .field("geo", &self.geo)
            .field("owned", &self.owner_map.len())
            .field("free", &self.free_set.len())
            .finish_non_exhaustive()
    }
}

impl ThinPool {
    /// Format a fresh pool on the device.
    ///
    /// The metadata extent is placed by best-fit among the free extents of
    /// the new device (a single whole-device extent at creation time), and
    /// the data region takes the chunks that follow it.
    pub fn create(dev: EncryptedDevice, chunk_size: u64) -> Result<Self> {
        let geo = compute_geometry(dev.capacity_bytes(), chunk_size)?;

        // Best-fit placement of the metadata extent over the initial free
        // extent list. On a fresh device there is exactly one extent and the
        // extent's head is used.
        let total_sectors = dev.capacity_bytes() / SECTOR_SIZE as u64;
        let extents = [(0u64, total_sectors)];
        let meta_sectors = metadata_extent_sectors(geo.chunk_count);
        let idx = best_fit(&extents, meta_sectors).ok_or(Error::DeviceTooSmall {
            chunks: 0,
            min: MIN_CHUNKS,
        })?;
        debug_assert_eq!(extents[idx].0, 0);

        let mut sb = [0u8; SECTOR_SIZE];
        sb[0..8].copy_from_slice(POOL_MAGIC);
        sb[8..12].copy_from_slice(&POOL_VERSION.to_le_bytes());
        sb[12..20].copy_from_slice(&chunk_size.to_le_bytes());
        sb[20..28].copy_from_slice(&geo.chunk_count.to_le_bytes());
        dev.write_sector(0, &sb)?;

        // Zero the count sector, record sectors, and the volume table.
        let zero = [0u8; SECTOR_SIZE];
        for s in 1..geo.data_start_sector {
            dev.write_sector(s, &zero)?;
        }

        Ok(Self {
            dev,
            geo,
            owner_map: BTreeMap::new(),
            slot_of_phys: HashMap::new(),
            slots: Vec::new(),
            free_set: (0..geo.chunk_count).collect(),
        })
    }

    /// Open an existing pool, replaying the persisted ownership records.
    pub fn open(dev: EncryptedDevice) -> Result<Self> {
        let mut sb = [0u8; SECTOR_SIZE];
        dev.read_sector(0, &mut sb)?;
        if sb[0..8] != *POOL_MAGIC
            || u32::from_le_bytes(sb[8..12].try_into().unwrap()) != POOL_VERSION
        {
            return Err(Error::CorruptPool);
        }
        let chunk_size = u64::from_le_bytes(sb[12..20].try_into().unwrap());
        let chunk_count = u64::from_le_bytes(sb[20..28].try_into().unwrap());
        let geo = compute_geometry(dev.capacity_bytes(), chunk_size)?;
        if geo.chunk_count != chunk_count {
            return Err(Error::CorruptPool);
        }

        let mut count_buf = [0u8; SECTOR_SIZE];
        dev.read_sector(1, &mut count_buf)?;
        let record_count = u64::from_le_bytes(count_buf[0..8].try_into().unwrap());
        if record_count > geo.chunk_count {
            return Err(Error::CorruptPool);
        }

        let mut slots = Vec::with_capacity(record_count as usize);
        let mut owner_map = BTreeMap::new();
        let mut slot_of_phys = HashMap::new();
        let mut free_set: BTreeSet<u64> = (0..geo.chunk_count).collect();
        let mut sector_buf = [0u8; SECTOR_SIZE];
        let mut loaded_sector = u64::MAX;
        for slot in 0..record_count {
            let sector = 2 + slot / RECORDS_PER_SECTOR;
            if sector != loaded_sector {
                dev.read_sector(sector, &mut sector_buf)?;
                loaded_sector = sector;
            }
            let off = (slot % RECORDS_PER_SECTOR) as usize * METADATA_RECORD_SIZE;
            let rec = MetadataRecord::from_bytes(&sector_buf[off..off + METADATA_RECORD_SIZE]);
            if rec.volume_id.is_nil()
                || rec.physical_chunk >= geo.chunk_count
                || !free_set.remove(&rec.physical_chunk)
            {
                return Err(Error::CorruptPool);
            }
            if owner_map
                .insert((rec.volume_id, rec.virtual_chunk), rec.physical_chunk)
                .is_some()
            {
                return Err(Error::CorruptPool);
            }
            slot_of_phys.insert(rec.physical_chunk, slot);
            slots.push(rec);
        }

        Ok(Self {
            dev,
            geo,
            owner_map,
            slot_of_phys,
            slots,
            free_set,
        })
    }

    pub fn geometry(&self) -> &PoolGeometry {
        &self.geo
    }

    pub fn chunk_size(&self) -> u64 {
        self.geo.chunk_size
    }

    pub fn chunk_count(&self) -> u64 {
        self.geo.chunk_count
    }

    pub fn free_chunks(&self) -> u64 {
        self.free_set.len() as u64
    }

    pub fn device(&self) -> &EncryptedDevice {
        &self.dev
    }

    fn persist_record(&self, slot: u64, rec: Option<&MetadataRecord>) -> Result<()> {
        let sector = 2 + slot / RECORDS_PER_SECTOR;
        let off = (slot % RECORDS_PER_SECTOR) as usize * METADATA_RECORD_SIZE;
        let mut buf = [0u8; SECTOR_SIZE];
        self.dev.read_sector(sector, &mut buf)?;
        let bytes = match rec {
            Some(r) => r.to_bytes(),
            None => [0u8; METADATA_RECORD_SIZE],
        };
        buf[off..off + METADATA_RECORD_SIZE].copy_from_slice(&bytes);
        self.dev.write_sector(sector, &buf)
    }

    fn persist_count(&self) -> Result<()> {
        let mut buf = [0u8; SECTOR_SIZE];
        buf[0..8].copy_from_slice(&(self.slots.len() as u64).to_le_bytes());
        self.dev.write_sector(1, &buf)
    }

    /// Allocate the lowest-index free chunk for `(volume, virtual_chunk)`.
    ///
    /// The chunk is zeroed through the encryption layer before the ownership
    /// record is persisted, so an allocated-but-unwritten sector always reads
    /// back as zeros (raw image zeros would decrypt to garbage otherwise).
    /// The record is persisted before this returns.
    pub fn allocate(&mut self, volume: VolumeId, virtual_chunk: u64) -> Result<u64> {
        debug_assert!(!volume.is_nil());
        if self.owner_map.contains_key(&(volume, virtual_chunk)) {
            return Err(Error::AlreadyMapped);
        }
        let phys = *self
            .free_set
            .iter()
            .next()
            .ok_or(Error::PoolExhausted { accepted: 0 })?;

        let zero = vec![0u8; self.geo.chunk_size as usize];
        let base = self.geo.data_start_sector + phys * self.geo.sectors_per_chunk();
        self.dev.write_sectors(base, &zero)?;

        let rec = MetadataRecord {
            volume_id: volume,
            virtual_chunk,
            physical_chunk: phys,
        };
        let slot = self.slots.len() as u64;
        self.persist_record(slot, Some(&rec))?;
        self.slots.push(rec);
        self.persist_count()?;

        self.free_set.remove(&phys);
        self.owner_map.insert((volume, virtual_chunk), phys);
        self.slot_of_phys.insert(phys, slot);
        Ok(phys)
    }

    /// Pure lookup; `None` means unallocated (not an error).
    pub fn lookup(&self, volume: VolumeId, virtual_chunk: u64) -> Option<u64> {
        self.owner_map.get(&(volume, virtual_chunk)).copied()
    }

    /// Release a chunk: zero its data, then swap-remove its record.
    pub fn deallocate(&mut self, volume: VolumeId, virtual_chunk: u64) -> Result<()> {
        let phys = self
            .owner_map
            .get(&(volume, virtual_chunk))
            .copied()
            .ok_or(Error::AlreadyMapped)?;

        // Zero before the chunk can be handed to another volume.
        let zero = vec![0u8; self.geo.chunk_size as usize];
        let base = self.geo.data_start_sector + phys * self.geo.sectors_per_chunk();
        self.dev.write_sectors(base, &zero)?;

        let slot = self.slot_of_phys[&phys];
        let last_slot = self.slots.len() as u64 - 1;
        if slot != last_slot {
            let moved = self.slots[last_slot as usize];
            self.persist_record(slot, Some(&moved))?;
            self.slots[slot as usize] = moved;
            self.slot_of_phys.insert(moved.physical_chunk, slot);
        }
        self.persist_record(last_slot, None)?;
        self.slots.pop();
        self.persist_count()?;

        self.owner_map.remove(&(volume, virtual_chunk));
        self.slot_of_phys.remove(&phys);
        self.free_set.insert(phys);
        Ok(())
    }

    /// Release every chunk owned by `volume`; returns how many were freed.
    pub fn deallocate_volume(&mut self, volume: VolumeId) -> Result<u64> {
        let vchunks: Vec<u64> = self
            .owner_map
            .range((volume, 0)..=(volume, u64::MAX))
            .map(|((_, v), _)| *v)
            .collect();
        for v in &vchunks {
            self.deallocate(volume, *v)?;
        }
        Ok(vchunks.len() as u64)
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            total_chunks: self.geo.chunk_count,
            owned_chunks: self.owner_map.len() as u64,
            free_chunks: self.free_set.len() as u64,
            eta: self.geo.utilization(),
        }
    }

    /// Owned virtual chunks of a volume, ascending: (virtual, physical).
    pub fn chunks_of(&self, volume: VolumeId) -> Vec<(u64, u64)> {
        self.owner_map
            .range((volume, 0)..=(volume, u64::MAX))
            .map(|((_, v), p)| (*v, *p))
            .collect()
    }

    /// Audit exclusive ownership and the capacity partition: every physical
    /// chunk appears under at most one owner, and owned + free = total.
    /// Returns the list of double-owned chunks (empty when healthy).
    pub fn audit_ownership(&self) -> Vec<u64> {
        let mut seen = BTreeSet::new();
        let mut dup = Vec::new();
        for phys in self.owner_map.values() {
            if !seen.insert(*phys) {
                dup.push(*phys);
            }
        }
        for phys in &self.free_set {
            if seen.contains(phys) {
                dup.push(*phys);
            }
        }
        if self.owner_map.len() + self.free_set.len() != self.geo.chunk_count as usize {
            dup.push(u64::MAX);
        }
        dup
    }

    fn chunk_sector(&self, physical_chunk: u64, sector_in_chunk: u64) -> Result<u64> {
        if physical_chunk >= self.geo.chunk_count || sector_in_chunk >= self.geo.sectors_per_chunk()
        {
            return Err(Error::OutOfRange {
                sector: physical_chunk * self.geo.sectors_per_chunk() + sector_in_chunk,
                count: self.geo.chunk_count * self.geo.sectors_per_chunk(),
            });
        }
        Ok(self.geo.data_start_sector + physical_chunk * self.geo.sectors_per_chunk() + sector_in_chunk)
    }

    /// Read one sector of a data chunk (decrypted by the FDE layer).
    pub fn read_chunk_sector(
        &self,
        physical_chunk: u64,
        sector_in_chunk: u64,
        buf: &mut SectorBuf,
    ) -> Result<()> {
        let s = self.chunk_sector(physical_chunk, sector_in_chunk)?;
        self.dev.read_sector(s, buf)
    }

    /// Write one sector of a data chunk (encrypted by the FDE layer).
    pub fn write_chunk_sector(
        &self,
        physical_chunk: u64,
        sector_in_chunk: u64,
        buf: &SectorBuf,
    ) -> Result<()> {
        let s = self.chunk_sector(physical_chunk, sector_in_chunk)?;
        self.dev.write_sector(s, buf)
    }

    fn chunk_run(&self, physical_chunk: u64, sector_in_chunk: u64, len_bytes: usize) -> Result<u64> {
        let sectors = (len_bytes / SECTOR_SIZE) as u64;
        if sector_in_chunk + sectors > self.geo.sectors_per_chunk() {
            return Err(Error::OutOfRange {
                sector: physical_chunk * self.geo.sectors_per_chunk() + sector_in_chunk + sectors,
                count: self.geo.chunk_count * self.geo.sectors_per_chunk(),
            });
        }
        self.chunk_sector(physical_chunk, sector_in_chunk)
    }

    /// Read a sector run within one chunk with a single backing IO.
    pub fn read_chunk_range(
        &self,
        physical_chunk: u64,
        sector_in_chunk: u64,
        buf: &mut [u8],
    ) -> Result<()> {
        let s = self.chunk_run(physical_chunk, sector_in_chunk, buf.len())?;
        self.dev.read_sectors(s, buf)
    }

    /// Write a sector run within one chunk with a single backing IO.
    pub fn write_chunk_range(
        &self,
        physical_chunk: u64,
        sector_in_chunk: u64,
        data: &[u8],
    ) -> Result<()> {
        let s = self.chunk_run(physical_chunk, sector_in_chunk, data.len())?;
        self.dev.write_sectors(s, data)
    }

    /// Read the volume table region.
    pub fn read_table(&self) -> Result<[u8; VOLUME_TABLE_BYTES]> {
        let mut out = [0u8; VOLUME_TABLE_BYTES];
        let mut buf = [0u8; SECTOR_SIZE];
        for (i, chunk) in out.chunks_exact_mut(SECTOR_SIZE).enumerate() {
            self.dev
                .read_sector(self.geo.table_start_sector + i as u64, &mut buf)?;
            chunk.copy_from_slice(&buf);
        }
        Ok(out)
    }

    /// Write only the first sector of the volume table region (the header
    /// carrying fill accounting), avoiding a full-table write per IO.
    pub fn write_table_header(&self, buf: &SectorBuf) -> Result<()> {
        self.dev.write_sector(self.geo.table_start_sector, buf)
    }

    /// Write the volume table region through to the device.
    pub fn write_table(&self, table: &[u8; VOLUME_TABLE_BYTES]) -> Result<()> {
        for (i, chunk) in table.chunks_exact(SECTOR_SIZE).enumerate() {
            let buf: &SectorBuf = chunk.try_into().unwrap();
            self.dev
                .write_sector(self.geo.table_start_sector + i as u64, buf)?;
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.dev.sync()
    }

    /// Absolute device sector of a data chunk's first sector, for building
    /// mapping tables.
    pub fn chunk_base_sector(&self, physical_chunk: u64) -> u64 {
        self.geo.data_start_sector + physical_chunk * self.geo.sectors_per_chunk()
    }
}
