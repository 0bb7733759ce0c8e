//! Executable attacks against a storage target, plus the reserved-area
//! baseline they are compared with.
//!
//! The capacity comparison attack returns 1 when the physical capacity
//! exceeds the reported outer capacity. The fill-to-full attack writes
//! seeded pseudo-random batches until the target reports a full-storage
//! condition, audits the accepted byte total, and reduces to a capacity
//! comparison of `audited + used_before` against the physical capacity.
//! Reports serialize as line-delimited structured text records.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{GygesStore, VolumeHandle};
use crate::thin_pool::METADATA_RECORD_SIZE;

/// Default fill batch: 4 MiB of seeded pseudo-random data.
pub const FILL_BATCH_DEFAULT: usize = 4 * 1024 * 1024;
/// Iterations of the hash chain realizing the offset-derivation PRF.
pub const OFFSET_HASH_ITERATIONS: u32 = 1000;
/// Per-filesystem overhead constant used in utilization composition.
pub const FS_OVERHEAD_DEFAULT: f64 = 0.10;

/// Which attack produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    CapacityCompare,
    FillToFull,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::CapacityCompare => "capacity_compare",
            AttackKind::FillToFull => "fill_to_full",
        }
    }
}

/// Attack outcome: verdict 1 flags a specially designed storage system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub verdict: u8,
    /// Accepted byte total; present only for the fill attack.
    pub audited_bytes: Option<u64>,
    pub elapsed: Duration,
}

impl AttackReport {
    /// One structured text record, consumable by the bench tooling.
    pub fn record_line(&self) -> String {
        let audited = match self.audited_bytes {
            Some(b) => b.to_string(),
            None => "-".to_string(),
        };
        format!(
            "attack={} verdict={} audited_bytes={} elapsed_ms={}",
            self.attack.as_str(),
            self.verdict,
            audited,
            self.elapsed.as_millis()
        )
    }
}

/// Capacity comparison: 1 iff `physical > reported`, 0 iff equal.
///
/// A reported capacity above the physical one flags a malformed target, not
/// a verdict.
pub fn capacity_compare(physical: u64, reported: u64) -> Result<u8> {
    if reported > physical {
        return Err(Error::InconsistentInputs {
            physical,
            reported,
        });
    }
    Ok(u8::from(physical > reported))
}

/// Convenience wrapper producing a report for the capacity attack.
pub fn attack_capacity_compare(physical: u64, reported: u64) -> Result<AttackReport> {
    let started = Instant::now();
    let verdict = capacity_compare(physical, reported)?;
    Ok(AttackReport {
        attack: AttackKind::CapacityCompare,
        verdict,
        audited_bytes: None,
        elapsed: started.elapsed(),
    })
}

/// A storage target the fill attack can drive through its public write
/// interface.
pub trait FillTarget {
    fn physical_capacity(&self) -> u64;
    /// Capacity the target shows to the attacker (the fill bound).
    fn visible_capacity(&self) -> u64;
    /// Bytes already in use before the attack.
    fn used_before(&self) -> u64;
    /// Volume-write semantics: `Ok(len)` on full acceptance;
    /// `FullStorage`/`PoolExhausted` carry the accepted prefix.
    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<usize>;
}

/// Fill the target with seeded pseudo-random batches until it reports a
/// full-storage condition, then reduce to the capacity comparison.
pub fn attack_fill_to_full(
    target: &mut dyn FillTarget,
    batch_size: usize,
    seed: u64,
) -> Result<AttackReport> {
    let started = Instant::now();
    let visible = target.visible_capacity();
    let used = target.used_before();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut batch = vec![0u8; batch_size.max(1)];
    let mut audited = 0u64;
    let mut cursor = used;

    loop {
        if cursor < visible {
            let n = (batch.len() as u64).min(visible - cursor) as usize;
            rng.fill_bytes(&mut batch[..n]);
            match target.write_at(cursor, &batch[..n]) {
                Ok(m) => {
                    audited += m as u64;
                    cursor += m as u64;
                }
                Err(Error::FullStorage { accepted }) | Err(Error::PoolExhausted { accepted }) => {
                    audited += accepted as u64;
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            // Visible space consumed without an error yet: the next byte
            // must surface the full-storage condition.
            rng.fill_bytes(&mut batch[..1]);
            match target.write_at(0, &batch[..1]) {
                Ok(m) => {
                    audited += m as u64;
                    break;
                }
                Err(Error::FullStorage { accepted }) | Err(Error::PoolExhausted { accepted }) => {
                    audited += accepted as u64;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let verdict = capacity_compare(target.physical_capacity(), used + audited)?;
    Ok(AttackReport {
        attack: AttackKind::FillToFull,
        verdict,
        audited_bytes: Some(audited),
        elapsed: started.elapsed(),
    })
}

/// Fill target over a store's outer volume.
pub struct StoreFillTarget<'a> {
    store: &'a mut GygesStore,
    outer: VolumeHandle,
    read_only: bool,
}

impl<'a> StoreFillTarget<'a> {
    pub fn new(store: &'a mut GygesStore) -> Result<Self> {
        let outer = store.outer_handle()?;
        Ok(Self {
            store,
            outer,
            read_only: false,
        })
    }

    pub fn read_only(mut self) -> Self {
        self.read_only = true;
        self
    }
}

impl FillTarget for StoreFillTarget<'_> {
    fn physical_capacity(&self) -> u64 {
        self.store.capacity_bytes()
    }

    fn visible_capacity(&self) -> u64 {
        self.outer.labeled_capacity()
    }

    fn used_before(&self) -> u64 {
        let fill = self.store.fill_accounting();
        if fill.engaged {
            fill.used_before
        } else {
            self.store.outer_committed()
        }
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<usize> {
        if self.read_only {
            return Err(Error::TargetReadOnly);
        }
        self.store.write(&self.outer, offset, data)
    }
}

/// Offset-derivation PRF: an iterated SHA-256 chain over password ∥ salt,
/// reduced to an unsigned integer (little-endian head of the final digest).
fn offset_hash(password: &[u8], salt: &[u8]) -> u64 {
    let mut digest = {
        let mut h = Sha256::new();
        h.update(password);
        h.update(salt);
        h.finalize()
    };
    for _ in 1..OFFSET_HASH_ITERATIONS {
        digest = Sha256::digest(digest);
    }
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hidden-volume placement offset of the reserved-area scheme:
/// `⌊0.75·vlen⌋ − (H(pwd ∥ salt) mod ⌊0.25·vlen⌋)`, in sectors.
///
/// Every output lies in `(⌊0.5·vlen⌋, ⌊0.75·vlen⌋]`.
pub fn mobiflage_offset(password: &[u8], salt: &[u8], vlen_sectors: u64) -> Result<u64> {
    if vlen_sectors < 8 {
        return Err(Error::VlenTooSmall(vlen_sectors));
    }
    let upper = vlen_sectors * 3 / 4;
    let divisor = vlen_sectors / 4;
    Ok(upper - offset_hash(password, salt) % divisor)
}

/// Capacity geometry of the reserved-area baseline: the hidden volume
/// floats above `offset`, the outer volume gets the sectors below it, and
/// the reported capacity is the true (smaller) outer capacity.
///
/// Behaves as an appending store for the fill attack: bytes are accepted
/// until the real outer capacity is reached, regardless of write offsets.
#[derive(Debug, Clone)]
pub struct ReservedAreaBaseline {
    vlen_sectors: u64,
    offset_sectors: u64,
    stored_bytes: u64,
    used_before: u64,
}

impl ReservedAreaBaseline {
    pub fn new(password: &[u8], salt: &[u8], vlen_sectors: u64) -> Result<Self> {
        let offset_sectors = mobiflage_offset(password, salt, vlen_sectors)?;
        Ok(Self {
            vlen_sectors,
            offset_sectors,
            stored_bytes: 0,
            used_before: 0,
        })
    }

    pub fn offset_sectors(&self) -> u64 {
        self.offset_sectors
    }

    pub fn vlen_bytes(&self) -> u64 {
        self.vlen_sectors * 512
    }

    /// True outer capacity: everything below the hidden-volume offset.
    pub fn outer_capacity_bytes(&self) -> u64 {
        self.offset_sectors * 512
    }

    /// Fraction of the disk the reserved area consumes.
    pub fn reserved_fraction(&self) -> f64 {
        1.0 - self.offset_sectors as f64 / self.vlen_sectors as f64
    }

    /// Simulate pre-attack usage on the outer volume.
    pub fn set_used(&mut self, bytes: u64) {
        let used = bytes.min(self.outer_capacity_bytes());
        self.used_before = used;
        self.stored_bytes = used;
    }
}

impl FillTarget for ReservedAreaBaseline {
    fn physical_capacity(&self) -> u64 {
        self.vlen_bytes()
    }

    fn visible_capacity(&self) -> u64 {
        self.outer_capacity_bytes()
    }

    fn used_before(&self) -> u64 {
        self.used_before
    }

    fn write_at(&mut self, _offset: u64, data: &[u8]) -> Result<usize> {
        let room = self.outer_capacity_bytes() - self.stored_bytes;
        let accepted = (data.len() as u64).min(room) as usize;
        self.stored_bytes += accepted as u64;
        if accepted < data.len() {
            return Err(Error::FullStorage { accepted });
        }
        Ok(accepted)
    }
}

/// One row of the utilization comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationRow {
    pub design: String,
    /// Block-layer utilization.
    pub block_eta: f64,
    /// Block-layer utilization minus the injected filesystem overheads.
    pub composed_eta: f64,
}

/// Block-layer utilization of the chunk-pool design for a given chunk size.
pub fn pool_block_eta(chunk_size: u64) -> f64 {
    chunk_size as f64 / (chunk_size + METADATA_RECORD_SIZE as u64) as f64
}

/// Compose block-layer utilizations with `fs_count` filesystems of
/// `fs_overhead` each.
pub fn utilization_compare(
    designs: &[(&str, f64)],
    fs_count: u32,
    fs_overhead: f64,
) -> Vec<UtilizationRow> {
    designs
        .iter()
        .map(|(name, block_eta)| UtilizationRow {
            design: name.to_string(),
            block_eta: *block_eta,
            composed_eta: (block_eta - fs_count as f64 * fs_overhead).max(0.0),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{FdeParams, KeySize};
    use crate::store::StoreParams;
    use tempfile::tempdir;

    const MIB: u64 = 1024 * 1024;

    fn fast_params() -> StoreParams {
        StoreParams {
            chunk_size: 65536,
            fde: FdeParams {
                kdf_iterations: 100,
                key_size: KeySize::Bits128,
            },
            name_trim: 16,
        }
    }

    #[test]
    fn capacity_verdicts() {
        // A 32 GB device whose outer volume reports 27 GB is flagged.
        assert_eq!(capacity_compare(32_000_000_000, 27_000_000_000).unwrap(), 1);
        assert_eq!(capacity_compare(64 * MIB, 64 * MIB).unwrap(), 0);
        assert!(matches!(
            capacity_compare(10, 11),
            Err(Error::InconsistentInputs { .. })
        ));
    }

    #[test]
    fn spoofed_store_defeats_capacity_attack() {
        let dir = tempdir().unwrap();
        let mut store =
            GygesStore::init(&dir.path().join("img"), 8 * MIB, b"pw", fast_params()).unwrap();
        store.create_outer().unwrap();
        let reported = store.outer_handle().unwrap().labeled_capacity();
        assert_eq!(capacity_compare(store.capacity_bytes(), reported).unwrap(), 0);
    }

    #[test]
    fn offset_matches_independent_hash_chain() {
        // Frozen from a standalone 1000-iteration SHA-256 chain.
        assert_eq!(offset_hash(b"alpha", &[0u8; 16]), 12_027_286_634_233_231_174);
        let off = mobiflage_offset(b"alpha", &[0u8; 16], 1 << 20).unwrap();
        assert_eq!(off, 624_826);
    }

    #[test]
    fn offset_is_deterministic() {
        let a = mobiflage_offset(b"pw", b"salt", 100_000).unwrap();
        let b = mobiflage_offset(b"pw", b"salt", 100_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offset_zero_remainder_hits_upper_bound() {
        // vlen = 8 gives divisor 2; any password whose hash is even lands
        // exactly on ⌊0.75·vlen⌋.
        let mut found = false;
        for i in 0..64u32 {
            let pwd = format!("probe-{i}");
            if offset_hash(pwd.as_bytes(), b"s") % 2 == 0 {
                assert_eq!(mobiflage_offset(pwd.as_bytes(), b"s", 8).unwrap(), 6);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn offset_band_on_sampled_inputs() {
        for i in 0..200u32 {
            let pwd = format!("pw-{i}");
            for vlen in [8u64, 1000, 1 << 20] {
                let off = mobiflage_offset(pwd.as_bytes(), b"salt", vlen).unwrap();
                assert!(off > vlen / 2, "vlen={vlen} off={off}");
                assert!(off <= vlen * 3 / 4, "vlen={vlen} off={off}");
            }
        }
    }

    #[test]
    fn offset_rejects_tiny_vlen() {
        assert!(matches!(
            mobiflage_offset(b"pw", b"s", 7),
            Err(Error::VlenTooSmall(7))
        ));
    }

    #[test]
    fn fill_attack_defeated_with_level0() {
        let dir = tempdir().unwrap();
        let mut store =
            GygesStore::init(&dir.path().join("img"), 8 * MIB, b"pw", fast_params()).unwrap();
        store.create_outer().unwrap();
        let outer = store.outer_handle().unwrap();
        store.write(&outer, 0, &[1u8; 512 * 1024]).unwrap();
        store.engage_level0().unwrap();

        let mut target = StoreFillTarget::new(&mut store).unwrap();
        let report = attack_fill_to_full(&mut target, 256 * 1024, 42).unwrap();
        assert_eq!(report.verdict, 0);
        assert_eq!(
            report.audited_bytes.unwrap() + 512 * 1024,
            8 * MIB
        );
    }

    #[test]
    fn fill_attack_succeeds_without_level0() {
        let dir = tempdir().unwrap();
        let mut store =
            GygesStore::init(&dir.path().join("img"), 8 * MIB, b"pw", fast_params()).unwrap();
        store.create_outer().unwrap();
        let mut target = StoreFillTarget::new(&mut store).unwrap();
        let report = attack_fill_to_full(&mut target, 256 * 1024, 42).unwrap();
        assert_eq!(report.verdict, 1);
        assert!(report.audited_bytes.unwrap() < 8 * MIB);
    }

    #[test]
    fn fill_attack_exposes_reserved_area_baseline() {
        let mut baseline = ReservedAreaBaseline::new(b"pw", b"salt", 65536).unwrap();
        baseline.set_used(3 * MIB);
        let report = attack_fill_to_full(&mut baseline, 256 * 1024, 7).unwrap();
        assert_eq!(report.verdict, 1);
        assert_eq!(
            report.audited_bytes.unwrap() + baseline.used_before(),
            baseline.outer_capacity_bytes()
        );
    }

    #[test]
    fn read_only_target_rejected() {
        let dir = tempdir().unwrap();
        let mut store =
            GygesStore::init(&dir.path().join("img"), 4 * MIB, b"pw", fast_params()).unwrap();
        store.create_outer().unwrap();
        let mut target = StoreFillTarget::new(&mut store).unwrap().read_only();
        assert!(matches!(
            attack_fill_to_full(&mut target, 4096, 0),
            Err(Error::TargetReadOnly)
        ));
    }

    #[test]
    fn utilization_table_reproduces_reference_numbers() {
        let rows = utilization_compare(
            &[
                ("gyges-store", pool_block_eta(65536)),
                ("reserved-area", 0.75),
            ],
            2,
            FS_OVERHEAD_DEFAULT,
        );
        assert!((rows[0].block_eta - 0.999024).abs() < 1e-6);
        assert!((rows[0].composed_eta - 0.799024).abs() < 1e-6);
        assert!((rows[1].block_eta - 0.75).abs() < 1e-9);
        assert!((rows[1].composed_eta - 0.55).abs() < 1e-9);
    }

    #[test]
    fn report_line_format() {
        let r = AttackReport {
            attack: AttackKind::FillToFull,
            verdict: 0,
            audited_bytes: Some(1234),
            elapsed: Duration::from_millis(5),
        };
        assert_eq!(
            r.record_line(),
            "attack=fill_to_full verdict=0 audited_bytes=1234 elapsed_ms=5"
        );
        let r = AttackReport {
            attack: AttackKind::CapacityCompare,
            verdict: 1,
            audited_bytes: None,
            elapsed: Duration::ZERO,
        };
        assert_eq!(
            r.record_line(),
            "attack=capacity_compare verdict=1 audited_bytes=- elapsed_ms=0"
        );
    }
}
