//! Facade over one image's full layer stack: physical volume, FDE, thin
//! pool, and volume table.
//!
//! Write semantics:
//!
//! - Chunks are allocated on first touch; reads of unallocated ranges
//!   return zeros.
//! - Hidden volume payloads pass through an extra per-volume AES-CBC-ESSIV
//!   cipher before reaching the pool.
//! - Null-sink writes are discarded and its reads return zeros.
//! - With level 0 engaged, outer writes that cannot obtain a free chunk are
//!   silently discarded while the attack byte counter accrues everything
//!   written; the full-storage error fires on precisely the first byte past
//!   `labeled capacity − used_before`.
//! - Without level 0, exhaustion surfaces immediately as a pool error.

use std::path::Path;

use crate::block_store::{DeviceId, MappingTuple, MappingType, PhysicalVolume, SECTOR_SIZE};
use crate::crypto::{EncryptedDevice, FdeParams, SectorCipher};
use crate::error::{Error, Result};
use crate::thin_pool::{PoolStats, ThinPool, VolumeId, CHUNK_SIZE_DEFAULT};
use crate::volumes::{
    derive_volume_key, derive_volume_name, volume_id_for, FillAccounting, VolumeEntry,
    VolumeKind, VolumeTable, MAX_VOLUMES, NAME_TRIM_DEFAULT, NULL_SINK_NAME, OUTER_NAME,
};

/// Counts of lower-layer open operations performed by this store instance.
/// Mount cycles must never increase these past their initial value of one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpenCounters {
    pub fde_opens: u64,
    pub pool_opens: u64,
}

/// Creation/open parameters.
#[derive(Debug, Clone, Copy)]
pub struct StoreParams {
    pub chunk_size: u64,
    pub fde: FdeParams,
    /// Hidden-name trim length `b` in hex characters.
    pub name_trim: usize,
}

impl Default for StoreParams {
    fn default() -> Self {
        Self {
            chunk_size: CHUNK_SIZE_DEFAULT,
            fde: FdeParams::default(),
            name_trim: NAME_TRIM_DEFAULT,
        }
    }
}

/// Runtime reference to a volume. Hidden handles carry the per-volume key;
/// the cipher is rebuilt per IO call.
#[derive(Clone)]
pub struct VolumeHandle {
    id: VolumeId,
    kind: VolumeKind,
    labeled_capacity: u64,
    name: String,
    key: Option<[u8; 16]>,
}

impl std::fmt::Debug for VolumeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolumeHandle")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("labeled_capacity", &self.labeled_capacity)
            .finish_non_exhaustive()
    }
}

impl VolumeHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    /// The displayed capacity, which for the outer volume is spoofed to the
    /// physical capacity.
    pub fn labeled_capacity(&self) -> u64 {
        self.labeled_capacity
    }

    pub fn id(&self) -> VolumeId {
        self.id
    }
}

/// One opened deniable store.
pub struct GygesStore {
    pool: ThinPool,
    table: VolumeTable,
    name_trim: usize,
    counters: OpenCounters,
}

impl std::fmt::Debug for GygesStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GygesStore")
            .field("pool", &self.pool)
            .field("volumes", &self.table.entries.len())
            .finish_non_exhaustive()
    }
}

impl GygesStore {
    /// Create a fresh image: physical volume, FDE footer, empty pool and
    /// volume table. The outer volume is not created here; `ensure_outer`
    /// (the unlock path) does that.
    pub fn init(
        path: &Path,
        capacity_bytes: u64,
        password: &[u8],
        params: StoreParams,
    ) -> Result<Self> {
        let vol = PhysicalVolume::create(path, capacity_bytes)?;
        let dev = EncryptedDevice::init(vol, password, params.fde)?;
        let pool = ThinPool::create(dev, params.chunk_size)?;
        let table = VolumeTable::default();
        pool.write_table(&table.to_bytes())?;
        pool.sync()?;
        Ok(Self {
            pool,
            table,
            name_trim: params.name_trim,
            counters: OpenCounters {
                fde_opens: 1,
                pool_opens: 1,
            },
        })
    }

    /// Open an existing image with the FDE password.
    pub fn open(path: &Path, password: &[u8], name_trim: usize) -> Result<Self> {
        let vol = PhysicalVolume::open(path)?;
        let dev = EncryptedDevice::open(vol, password)?;
        let pool = ThinPool::open(dev)?;
        let table = VolumeTable::from_bytes(&pool.read_table()?)?;
        Ok(Self {
            pool,
            table,
            name_trim,
            counters: OpenCounters {
                fde_opens: 1,
                pool_opens: 1,
            },
        })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.pool.device().capacity_bytes()
    }

    pub fn kdf_salt(&self) -> [u8; 16] {
        self.pool.device().kdf_salt()
    }

    pub fn counters(&self) -> OpenCounters {
        self.counters
    }

    pub fn stats(&self) -> PoolStats {
        self.pool.stats()
    }

    pub fn fill_accounting(&self) -> FillAccounting {
        self.table.fill
    }

    /// Bytes committed on the outer volume (high-water mark of write ends).
    pub fn outer_committed(&self) -> u64 {
        self.table.outer_committed
    }

    pub fn pool(&self) -> &ThinPool {
        &self.pool
    }

    pub fn volume_entries(&self) -> &[VolumeEntry] {
        &self.table.entries
    }

    pub fn name_trim(&self) -> usize {
        self.name_trim
    }

    fn persist_table_header(&self) -> Result<()> {
        self.pool.write_table_header(&self.table.header_bytes())
    }

    fn persist_table(&self) -> Result<()> {
        self.pool.write_table(&self.table.to_bytes())
    }

    /// Create the outer volume, labeled at the full physical capacity
    /// regardless of real free space.
    pub fn create_outer(&mut self) -> Result<()> {
        if self.table.outer().is_some() {
            return Err(Error::OuterExists);
        }
        self.table.entries.push(VolumeEntry {
            name: OUTER_NAME.into(),
            kind: VolumeKind::Outer,
            labeled_capacity: self.capacity_bytes(),
        });
        self.persist_table()
    }

    /// Create the outer volume if absent; returns whether it was created.
    pub fn ensure_outer(&mut self) -> Result<bool> {
        if self.table.outer().is_some() {
            return Ok(false);
        }
        self.create_outer()?;
        Ok(true)
    }

    /// Register a hidden volume under its password-derived name.
    ///
    /// Nothing stored links the name back to the password. `level` orders
    /// deniability tiers for the operator and must be at least 1; it is not
    /// persisted.
    pub fn create_hidden(
        &mut self,
        password: &[u8],
        level: u32,
        labeled_capacity: u64,
    ) -> Result<String> {
        if level < 1 {
            return Err(Error::BadLevel(level));
        }
        let salt = self.kdf_salt();
        let name = derive_volume_name(password, &salt, self.name_trim)?;
        if self.table.find(&name).is_some() {
            return Err(Error::NameCollision);
        }
        if self.table.entries.len() >= MAX_VOLUMES {
            return Err(Error::VolumeTableFull);
        }
        self.table.entries.push(VolumeEntry {
            name: name.clone(),
            kind: VolumeKind::Hidden,
            labeled_capacity,
        });
        self.persist_table()?;
        Ok(name)
    }

    /// Handle to the outer volume.
    pub fn outer_handle(&self) -> Result<VolumeHandle> {
        let entry = self.table.outer().ok_or(Error::NoOuterVolume)?;
        Ok(VolumeHandle {
            id: volume_id_for(&entry.name),
            kind: VolumeKind::Outer,
            labeled_capacity: entry.labeled_capacity,
            name: entry.name.clone(),
            key: None,
        })
    }

    /// Handle to a hidden volume by password. A wrong password derives an
    /// absent name, indistinguishable from a volume that never existed.
    pub fn hidden_handle(&self, password: &[u8]) -> Result<VolumeHandle> {
        let salt = self.kdf_salt();
        let name = derive_volume_name(password, &salt, self.name_trim)?;
        let entry = self.table.find(&name).ok_or(Error::UnknownVolume)?;
        if entry.kind != VolumeKind::Hidden {
            return Err(Error::UnknownVolume);
        }
        Ok(VolumeHandle {
            id: volume_id_for(&entry.name),
            kind: VolumeKind::Hidden,
            labeled_capacity: entry.labeled_capacity,
            name: entry.name.clone(),
            key: Some(derive_volume_key(password, &salt)),
        })
    }

    /// The level-0 null sink: owns no chunks, discards writes, reads zeros.
    pub fn null_sink_handle(&self) -> VolumeHandle {
        VolumeHandle {
            id: volume_id_for(NULL_SINK_NAME),
            kind: VolumeKind::NullSink,
            labeled_capacity: self.capacity_bytes(),
            name: NULL_SINK_NAME.into(),
            key: None,
        }
    }

    /// Engage the level-0 defense: snapshot the outer volume's committed
    /// bytes and start recording attack traffic.
    pub fn engage_level0(&mut self) -> Result<()> {
        if self.table.outer().is_none() {
            return Err(Error::NoOuterVolume);
        }
        self.table.fill = FillAccounting {
            engaged: true,
            used_before: self.table.outer_committed,
            recorded: 0,
        };
        self.persist_table_header()
    }

    fn check_label(&self, vol: &VolumeHandle, offset: u64, len: usize) -> Result<()> {
        let end = offset.checked_add(len as u64);
        match end {
            Some(end) if end <= vol.labeled_capacity => Ok(()),
            _ => Err(Error::OutOfLabelRange {
                offset,
                len: len as u64,
                label: vol.labeled_capacity,
            }),
        }
    }

    /// Read `out.len()` bytes at `offset`. Unallocated ranges read as zeros.
    pub fn read(&self, vol: &VolumeHandle, offset: u64, out: &mut [u8]) -> Result<()> {
        self.check_label(vol, offset, out.len())?;
        if vol.kind == VolumeKind::NullSink {
            out.fill(0);
            return Ok(());
        }
        let cipher = vol.key.map(|k| SectorCipher::new(&k));
        let chunk_size = self.pool.chunk_size();
        let mut pos = offset;
        let mut out = out;
        while !out.is_empty() {
            let vchunk = pos / chunk_size;
            let chunk_end = (vchunk + 1) * chunk_size;
            let n = out.len().min((chunk_end - pos) as usize);
            match self.pool.lookup(vol.id, vchunk) {
                None => out[..n].fill(0),
                Some(p) => self.read_piece(p, pos, &mut out[..n], &cipher)?,
            }
            pos += n as u64;
            out = &mut out[n..];
        }
        Ok(())
    }

    /// Read a byte range lying inside one allocated chunk: partial head and
    /// tail sectors individually, the full-sector middle as one IO.
    fn read_piece(
        &self,
        phys: u64,
        mut pos: u64,
        mut out: &mut [u8],
        cipher: &Option<SectorCipher>,
    ) -> Result<()> {
        let chunk_size = self.pool.chunk_size();
        let within = (pos % SECTOR_SIZE as u64) as usize;
        if within != 0 {
            let n = out.len().min(SECTOR_SIZE - within);
            let mut buf = [0u8; SECTOR_SIZE];
            self.pool
                .read_chunk_sector(phys, (pos % chunk_size) / SECTOR_SIZE as u64, &mut buf)?;
            if let Some(c) = cipher {
                decrypt_volume_sector(c, pos / SECTOR_SIZE as u64, &mut buf);
            }
            out[..n].copy_from_slice(&buf[within..within + n]);
            pos += n as u64;
            out = &mut out[n..];
        }
        if out.is_empty() {
            return Ok(());
        }
        let full = out.len() / SECTOR_SIZE * SECTOR_SIZE;
        if full > 0 {
            let sector_in_chunk = (pos % chunk_size) / SECTOR_SIZE as u64;
            let logical = pos / SECTOR_SIZE as u64;
            self.pool
                .read_chunk_range(phys, sector_in_chunk, &mut out[..full])?;
            if let Some(c) = cipher {
                for (i, s) in out[..full].chunks_exact_mut(SECTOR_SIZE).enumerate() {
                    decrypt_volume_sector(c, logical + i as u64, s);
                }
            }
            pos += full as u64;
            out = &mut out[full..];
        }
        if !out.is_empty() {
            let mut buf = [0u8; SECTOR_SIZE];
            self.pool
                .read_chunk_sector(phys, (pos % chunk_size) / SECTOR_SIZE as u64, &mut buf)?;
            if let Some(c) = cipher {
                decrypt_volume_sector(c, pos / SECTOR_SIZE as u64, &mut buf);
            }
            let n = out.len();
            out.copy_from_slice(&buf[..n]);
        }
        Ok(())
    }

    /// Write `data` at `offset`. On success every byte was accepted; the
    /// partial-progress errors carry the accepted prefix length.
    pub fn write(&mut self, vol: &VolumeHandle, offset: u64, data: &[u8]) -> Result<usize> {
        self.check_label(vol, offset, data.len())?;
        if data.is_empty() {
            return Ok(0);
        }
        match vol.kind {
            VolumeKind::NullSink => Ok(data.len()),
            VolumeKind::Hidden => self.write_mapped(vol, offset, data, false),
            VolumeKind::Outer => {
                if self.table.fill.engaged {
                    let remaining = self.table.fill.remaining(vol.labeled_capacity);
                    let m = (data.len() as u64).min(remaining) as usize;
                    if m > 0 {
                        self.write_mapped(vol, offset, &data[..m], true)?;
                        self.table.fill.recorded += m as u64;
                        self.note_outer_committed(offset + m as u64);
                        self.persist_table_header()?;
                    }
                    if m < data.len() {
                        return Err(Error::FullStorage { accepted: m });
                    }
                    Ok(data.len())
                } else {
                    let res = self.write_mapped(vol, offset, data, false);
                    let accepted = match &res {
                        Ok(n) => *n,
                        Err(Error::PoolExhausted { accepted }) => *accepted,
                        Err(_) => 0,
                    };
                    if accepted > 0 {
                        self.note_outer_committed(offset + accepted as u64);
                        self.persist_table_header()?;
                    }
                    res
                }
            }
        }
    }

    fn note_outer_committed(&mut self, end: u64) {
        if end > self.table.outer_committed {
            self.table.outer_committed = end;
        }
    }

    /// Chunk-granular mapped write. With `null_redirect`, pieces that
    /// cannot obtain a chunk vanish into the null sink instead of failing.
    fn write_mapped(
        &mut self,
        vol: &VolumeHandle,
        offset: u64,
        data: &[u8],
        null_redirect: bool,
    ) -> Result<usize> {
        let cipher = vol.key.map(|k| SectorCipher::new(&k));
        let chunk_size = self.pool.chunk_size();
        let mut accepted = 0usize;
        let mut pos = offset;
        let mut data = data;
        while !data.is_empty() {
            let vchunk = pos / chunk_size;
            let chunk_end = (vchunk + 1) * chunk_size;
            let n = data.len().min((chunk_end - pos) as usize);
            let phys = match self.pool.lookup(vol.id, vchunk) {
                Some(p) => Some(p),
                None => match self.pool.allocate(vol.id, vchunk) {
                    Ok(p) => Some(p),
                    Err(Error::PoolExhausted { .. }) if null_redirect => None,
                    Err(Error::PoolExhausted { .. }) => {
                        return Err(Error::PoolExhausted { accepted })
                    }
                    Err(e) => return Err(e),
                },
            };
            if let Some(p) = phys {
                self.write_piece(p, pos, &data[..n], &cipher)?;
            }
            accepted += n;
            pos += n as u64;
            data = &data[n..];
        }
        Ok(accepted)
    }

    /// Write a byte range lying inside one allocated chunk: read-modify-
    /// write for partial head/tail sectors, one batched IO for the middle.
    fn write_piece(
        &self,
        phys: u64,
        mut pos: u64,
        mut data: &[u8],
        cipher: &Option<SectorCipher>,
    ) -> Result<()> {
        let within = (pos % SECTOR_SIZE as u64) as usize;
        if within != 0 {
            let n = data.len().min(SECTOR_SIZE - within);
            self.rmw_sector(phys, pos, &data[..n], cipher)?;
            pos += n as u64;
            data = &data[n..];
        }
        if data.is_empty() {
            return Ok(());
        }
        let full = data.len() / SECTOR_SIZE * SECTOR_SIZE;
        if full > 0 {
            let chunk_size = self.pool.chunk_size();
            let sector_in_chunk = (pos % chunk_size) / SECTOR_SIZE as u64;
            let logical = pos / SECTOR_SIZE as u64;
            if let Some(c) = cipher {
                let mut staging = data[..full].to_vec();
                for (i, s) in staging.chunks_exact_mut(SECTOR_SIZE).enumerate() {
                    encrypt_volume_sector(c, logical + i as u64, s);
                }
                self.pool.write_chunk_range(phys, sector_in_chunk, &staging)?;
            } else {
                self.pool
                    .write_chunk_range(phys, sector_in_chunk, &data[..full])?;
            }
            pos += full as u64;
            data = &data[full..];
        }
        if !data.is_empty() {
            self.rmw_sector(phys, pos, data, cipher)?;
        }
        Ok(())
    }

    /// Patch `bytes` into the sector containing `pos` (read-modify-write
    /// through the per-volume cipher when present).
    fn rmw_sector(
        &self,
        phys: u64,
        pos: u64,
        bytes: &[u8],
        cipher: &Option<SectorCipher>,
    ) -> Result<()> {
        let chunk_size = self.pool.chunk_size();
        let within = (pos % SECTOR_SIZE as u64) as usize;
        debug_assert!(within + bytes.len() <= SECTOR_SIZE);
        let sector_in_chunk = (pos % chunk_size) / SECTOR_SIZE as u64;
        let logical = pos / SECTOR_SIZE as u64;
        let mut buf = [0u8; SECTOR_SIZE];
        self.pool.read_chunk_sector(phys, sector_in_chunk, &mut buf)?;
        if let Some(c) = cipher {
            decrypt_volume_sector(c, logical, &mut buf);
        }
        buf[within..within + bytes.len()].copy_from_slice(bytes);
        if let Some(c) = cipher {
            encrypt_volume_sector(c, logical, &mut buf);
        }
        self.pool.write_chunk_sector(phys, sector_in_chunk, &buf)
    }

    /// Current device-mapping table of a volume as ordered, disjoint
    /// 5-tuples: linear runs for allocated chunks, plus (for the outer
    /// volume with level 0 engaged) null tuples over the unallocated gaps.
    pub fn mapping_table(&self, vol: &VolumeHandle) -> Vec<MappingTuple> {
        let spc = self.pool.geometry().sectors_per_chunk();
        let label_sectors = vol.labeled_capacity.div_ceil(SECTOR_SIZE as u64);
        let pool_dev = DeviceId(0);

        if vol.kind == VolumeKind::NullSink {
            return vec![MappingTuple {
                logical_offset_sectors: 0,
                length_sectors: label_sectors.max(1),
                mapping_type: MappingType::Null,
                target_device: pool_dev,
                physical_offset_sectors: 0,
            }];
        }

        let chunks = self.pool.chunks_of(vol.id);
        let mut tuples = Vec::new();
        let mut i = 0;
        while i < chunks.len() {
            let (v0, p0) = chunks[i];
            let mut run = 1u64;
            while i + (run as usize) < chunks.len() {
                let (v, p) = chunks[i + run as usize];
                if v == v0 + run && p == p0 + run {
                    run += 1;
                } else {
                    break;
                }
            }
            tuples.push(MappingTuple {
                logical_offset_sectors: v0 * spc,
                length_sectors: run * spc,
                mapping_type: MappingType::Linear,
                target_device: pool_dev,
                physical_offset_sectors: self.pool.chunk_base_sector(p0),
            });
            i += run as usize;
        }

        if vol.kind == VolumeKind::Outer && self.table.fill.engaged {
            // Unallocated label ranges drain to the null sink while level 0
            // is engaged.
            let label_chunks = vol.labeled_capacity.div_ceil(self.pool.chunk_size());
            let allocated: std::collections::BTreeSet<u64> =
                chunks.iter().map(|(v, _)| *v).collect();
            let mut v = 0u64;
            while v < label_chunks {
                if allocated.contains(&v) {
                    v += 1;
                    continue;
                }
                let start = v;
                while v < label_chunks && !allocated.contains(&v) {
                    v += 1;
                }
                let lo = start * spc;
                let hi = (v * spc).min(label_sectors);
                if hi > lo {
                    tuples.push(MappingTuple {
                        logical_offset_sectors: lo,
                        length_sectors: hi - lo,
                        mapping_type: MappingType::Null,
                        target_device: pool_dev,
                        physical_offset_sectors: 0,
                    });
                }
            }
        }
        tuples
    }

    pub fn audit_ownership(&self) -> Vec<u64> {
        self.pool.audit_ownership()
    }

    pub fn sync(&self) -> Result<()> {
        self.pool.sync()
    }
}

/// Hidden-volume sector encryption with the all-zero identity convention:
/// an all-zero sector stores as zeros so never-written sectors of an
/// allocated chunk read back as zeros through the volume cipher.
fn encrypt_volume_sector(cipher: &SectorCipher, sector: u64, buf: &mut [u8]) {
    debug_assert_eq!(buf.len(), SECTOR_SIZE);
    if buf.iter().all(|&b| b == 0) {
        return;
    }
    cipher.encrypt_sector(sector, buf);
}

fn decrypt_volume_sector(cipher: &SectorCipher, sector: u64, buf: &mut [u8]) {
    debug_assert_eq!(buf.len(), SECTOR_SIZE);
    if buf.iter().all(|&b| b == 0) {
        return;
    }
    cipher.decrypt_sector(sector, buf);
}
