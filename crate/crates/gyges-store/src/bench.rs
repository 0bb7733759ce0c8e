//! IO measurement harness over the layer stack.
//!
//! Workloads are sequential/random reads and writes of fixed-size blocks.
//! Write trials use fresh seeded pseudo-random data and flush before the
//! clock stops; afterwards a sampled 1% of written blocks is read back and
//! verified, because a benchmark that corrupts data is invalid. Only
//! relative numbers are meaningful: absolute device figures are
//! hardware-specific, so results carry ratios against the raw layer.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::block_store::{PhysicalVolume, SECTOR_SIZE};
use crate::crypto::EncryptedDevice;
use crate::error::{Error, Result};
use crate::store::{GygesStore, VolumeHandle};

/// Reference hidden/outer sequential-write throughput ratio measured on
/// mobile hardware; printed as an annotation, never asserted.
pub const REFERENCE_HIDDEN_OUTER_WRITE_RATIO: f64 = 0.97;

/// Benchmark workload shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    SeqRead,
    SeqWrite,
    RndRead,
    RndWrite,
}

impl Workload {
    pub fn as_str(self) -> &'static str {
        match self {
            Workload::SeqRead => "seq_read",
            Workload::SeqWrite => "seq_write",
            Workload::RndRead => "rnd_read",
            Workload::RndWrite => "rnd_write",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seq_read" => Some(Workload::SeqRead),
            "seq_write" => Some(Workload::SeqWrite),
            "rnd_read" => Some(Workload::RndRead),
            "rnd_write" => Some(Workload::RndWrite),
            _ => None,
        }
    }

    fn is_write(self) -> bool {
        matches!(self, Workload::SeqWrite | Workload::RndWrite)
    }

    fn is_random(self) -> bool {
        matches!(self, Workload::RndRead | Workload::RndWrite)
    }
}

/// Byte-addressed IO surface a benchmark can drive.
pub trait BenchIo {
    /// Bytes the target can safely accept from offset 0.
    fn usable_len(&self) -> u64;
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()>;
    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()>;
    /// Commit written data durably; timed as part of a write trial.
    fn flush(&mut self) -> Result<()>;
}

/// Result of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub workload: Workload,
    pub target: String,
    pub throughput_bps: f64,
    pub sigma_bps: f64,
    pub trials: u32,
    pub bytes_per_trial: u64,
}

impl BenchResult {
    pub fn mb_per_s(&self) -> f64 {
        self.throughput_bps / (1024.0 * 1024.0)
    }

    /// Sanity bound: a layer above `lower` may not measure faster than
    /// `lower` by more than combined 3σ noise.
    pub fn monotone_under(&self, lower: &BenchResult) -> bool {
        let noise = (self.sigma_bps.powi(2) + lower.sigma_bps.powi(2)).sqrt();
        self.throughput_bps <= lower.throughput_bps + 3.0 * noise
    }
}

fn block_seed(seed: u64, trial: u32, offset: u64) -> u64 {
    // Splittable per-block seed so verification can regenerate any block.
    seed ^ (u64::from(trial) << 56) ^ offset.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn offsets_for(workload: Workload, total_bytes: u64, block_size: u64, rng: &mut ChaCha20Rng) -> Vec<u64> {
    let blocks = total_bytes / block_size;
    let mut offsets: Vec<u64> = (0..blocks).map(|i| i * block_size).collect();
    if workload.is_random() {
        for i in (1..offsets.len()).rev() {
            let j = rng.gen_range(0..=i);
            offsets.swap(i, j);
        }
    }
    offsets
}

/// Run one benchmark: `trials` passes of `total_bytes` in `block_size`
/// blocks. The mean throughput is over trials; writes are durably flushed
/// inside the timed window and then spot-verified.
pub fn run_bench(
    target: &mut dyn BenchIo,
    target_name: &str,
    workload: Workload,
    total_bytes: u64,
    block_size: u64,
    trials: u32,
    seed: u64,
) -> Result<BenchResult> {
    if trials == 0 {
        return Err(Error::ZeroTrials);
    }
    if block_size == 0
        || block_size % SECTOR_SIZE as u64 != 0
        || total_bytes < block_size
        || total_bytes % block_size != 0
    {
        return Err(Error::TargetTooSmall {
            need: block_size.max(1),
            have: total_bytes,
        });
    }
    if total_bytes > target.usable_len() {
        return Err(Error::TargetTooSmall {
            need: total_bytes,
            have: target.usable_len(),
        });
    }

    let mut order_rng = ChaCha20Rng::seed_from_u64(seed);
    let mut buf = vec![0u8; block_size as usize];
    let mut throughputs = Vec::with_capacity(trials as usize);

    if !workload.is_write() {
        // Prefill once so reads touch real data.
        for offset in offsets_for(Workload::SeqWrite, total_bytes, block_size, &mut order_rng) {
            let mut rng = ChaCha20Rng::seed_from_u64(block_seed(seed, u32::MAX, offset));
            rng.fill_bytes(&mut buf);
            target.write_at(offset, &buf)?;
        }
        target.flush()?;
    }

    for trial in 0..trials {
        let offsets = offsets_for(workload, total_bytes, block_size, &mut order_rng);
        let started = Instant::now();
        if workload.is_write() {
            for &offset in &offsets {
                let mut rng = ChaCha20Rng::seed_from_u64(block_seed(seed, trial, offset));
                rng.fill_bytes(&mut buf);
                target.write_at(offset, &buf)?;
            }
            target.flush()?;
        } else {
            let mut sink = 0u64;
            for &offset in &offsets {
                target.read_at(offset, &mut buf)?;
                sink = sink.wrapping_add(u64::from(buf[0]));
            }
            std::hint::black_box(sink);
        }
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        throughputs.push(total_bytes as f64 / elapsed);

        if workload.is_write() {
            verify_sample(target, workload, total_bytes, block_size, trials, trial, seed, &offsets)?;
        }
    }

    let mean = throughputs.iter().sum::<f64>() / throughputs.len() as f64;
    let var = throughputs
        .iter()
        .map(|t| (t - mean).powi(2))
        .sum::<f64>()
        / throughputs.len() as f64;
    Ok(BenchResult {
        workload,
        target: target_name.to_string(),
        throughput_bps: mean,
        sigma_bps: var.sqrt(),
        trials,
        bytes_per_trial: total_bytes,
    })
}

/// Read back ~1% of the blocks written this trial (at least one) and
/// compare with the regenerated data.
#[allow(clippy::too_many_arguments)]
fn verify_sample(
    target: &mut dyn BenchIo,
    workload: Workload,
    _total_bytes: u64,
    block_size: u64,
    _trials: u32,
    trial: u32,
    seed: u64,
    offsets: &[u64],
) -> Result<()> {
    debug_assert!(workload.is_write());
    let sample = (offsets.len() / 100).max(1);
    let mut check_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xBEEF ^ u64::from(trial));
    let mut expected = vec![0u8; block_size as usize];
    let mut got = vec![0u8; block_size as usize];
    for _ in 0..sample {
        let offset = offsets[check_rng.gen_range(0..offsets.len())];
        let mut rng = ChaCha20Rng::seed_from_u64(block_seed(seed, trial, offset));
        rng.fill_bytes(&mut expected);
        target.read_at(offset, &mut got)?;
        if got != expected {
            return Err(Error::ReadbackMismatch(offset));
        }
    }
    Ok(())
}

/// Raw physical layer target.
pub struct RawTarget<'a> {
    vol: &'a PhysicalVolume,
}

impl<'a> RawTarget<'a> {
    pub fn new(vol: &'a PhysicalVolume) -> Self {
        Self { vol }
    }
}

impl BenchIo for RawTarget<'_> {
    fn usable_len(&self) -> u64 {
        self.vol.capacity_bytes()
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.vol.read_sectors(offset / SECTOR_SIZE as u64, buf)
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.vol.write_sectors(offset / SECTOR_SIZE as u64, data)
    }

    fn flush(&mut self) -> Result<()> {
        self.vol.sync()
    }
}

/// FDE layer target (encryption, no pooling).
pub struct FdeTarget<'a> {
    dev: &'a EncryptedDevice,
}

impl<'a> FdeTarget<'a> {
    pub fn new(dev: &'a EncryptedDevice) -> Self {
        Self { dev }
    }
}

impl BenchIo for FdeTarget<'_> {
    fn usable_len(&self) -> u64 {
        self.dev.capacity_bytes()
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.dev.read_sectors(offset / SECTOR_SIZE as u64, buf)
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.dev.write_sectors(offset / SECTOR_SIZE as u64, data)
    }

    fn flush(&mut self) -> Result<()> {
        self.dev.sync()
    }
}

/// Volume layer target (outer or hidden, through the pool).
pub struct VolumeTarget<'a> {
    store: &'a mut GygesStore,
    vol: VolumeHandle,
}

impl<'a> VolumeTarget<'a> {
    pub fn new(store: &'a mut GygesStore, vol: VolumeHandle) -> Self {
        Self { store, vol }
    }
}

impl BenchIo for VolumeTarget<'_> {
    fn usable_len(&self) -> u64 {
        // Bounded by what the pool can actually back: chunks this volume
        // already owns plus the free ones, capped at the label.
        let stats = self.store.stats();
        let own = self.store.pool().chunks_of(self.vol.id()).len() as u64;
        ((own + stats.free_chunks) * self.store.pool().chunk_size())
            .min(self.vol.labeled_capacity())
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.store.read(&self.vol, offset, buf)
    }

    fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.store.write(&self.vol, offset, data).map(|_| ())
    }

    fn flush(&mut self) -> Result<()> {
        self.store.sync()
    }
}

/// Render results as an aligned text table with a ratio column against the
/// `raw` target of the same workload.
pub fn format_table(rows: &[BenchResult]) -> String {
    let mut out = String::from("workload   target   MB/s       ratio-vs-raw\n");
    for row in rows {
        let ratio = rows
            .iter()
            .find(|r| r.workload == row.workload && r.target == "raw")
            .map(|raw| format!("{:.3}", row.throughput_bps / raw.throughput_bps))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<10} {:<8} {:<10.2} {}\n",
            row.workload.as_str(),
            row.target,
            row.mb_per_s(),
            ratio
        ));
    }
    let has = |t: &str, w: Workload| rows.iter().any(|r| r.target == t && r.workload == w);
    if has("hidden", Workload::SeqWrite) && has("outer", Workload::SeqWrite) {
        out.push_str(&format!(
            "note: reference mobile-hardware hidden/outer write ratio = {REFERENCE_HIDDEN_OUTER_WRITE_RATIO}\n"
        ));
    }
    out
}

/// CSV rendering: workload,target,mb_per_s,ratio_vs_raw.
pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut out = String::from("workload,target,mb_per_s,ratio_vs_raw\n");
    for row in rows {
        let ratio = rows
            .iter()
            .find(|r| r.workload == row.workload && r.target == "raw")
            .map(|raw| format!("{:.4}", row.throughput_bps / raw.throughput_bps))
            .unwrap_or_else(|| "".to_string());
        out.push_str(&format!(
            "{},{},{:.3},{}\n",
            row.workload.as_str(),
            row.target,
            row.mb_per_s(),
            ratio
        ));
    }
    out
}
