//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values.
//!
//! Run with `cargo test -p gyges-cli --test acceptance` (add
//! `-- --nocapture` to see the PASS lines of successful criteria).

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use gyges_store::adversary::{
    attack_fill_to_full, capacity_compare, mobiflage_offset, pool_block_eta, utilization_compare,
    ReservedAreaBaseline, StoreFillTarget, FS_OVERHEAD_DEFAULT,
};
use gyges_store::crypto::{FdeParams, KeySize};
use gyges_store::error::Error;
use gyges_store::mount::MountRegistry;
use gyges_store::store::{GygesStore, StoreParams, VolumeHandle};
use gyges_store::thin_pool::metadata_bytes_for;

const MIB: u64 = 1024 * 1024;
const SECTOR: u64 = 512;

fn fast_params(chunk_size: u64) -> StoreParams {
    StoreParams {
        chunk_size,
        fde: FdeParams {
            kdf_iterations: 100,
            key_size: KeySize::Bits128,
        },
        name_trim: 16,
    }
}

fn new_store(dir: &tempfile::TempDir, name: &str, capacity: u64, chunk: u64) -> GygesStore {
    GygesStore::init(&dir.path().join(name), capacity, b"fde-pw", fast_params(chunk)).unwrap()
}

/// Criterion 1: pool utilization with 64 KiB chunks lands on the design
/// value 99.9024% within 1e-6, in under a second.
#[test]
fn acceptance_01_utilization_reproduction() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let store = new_store(&dir, "img", 64 * MIB, 64 * 1024);
    let eta = store.stats().eta;
    assert!(
        (eta - 0.999024).abs() < 1e-6,
        "eta {eta} departs from 0.999024"
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!("ACCEPTANCE 1 PASS: eta={eta:.7} (target 0.999024 ± 1e-6) in {elapsed:?}");
}

/// Independent layout arithmetic used as the oracle for criterion 2: the
/// metadata extent is superblock + count sector + ceil(n/8) record sectors
/// + 8 table sectors, followed by the n data chunks.
fn oracle_capacity_for(n_chunks: u64, chunk_size: u64) -> u64 {
    let meta_sectors = 1 + 1 + n_chunks.div_ceil(8) + 8;
    meta_sectors * SECTOR + n_chunks * chunk_size
}

/// Criterion 2: metadata bytes are exactly 64 per data chunk for every
/// combination of chunk size {4 KiB, 64 KiB, 1 MiB} and pool size
/// {16 MiB, 64 MiB, 256 MiB}.
#[test]
fn acceptance_02_metadata_sizing_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (ci, &chunk) in [4 * 1024u64, 64 * 1024, 1024 * 1024].iter().enumerate() {
        for (pi, &pool_bytes) in [16 * MIB, 64 * MIB, 256 * MIB].iter().enumerate() {
            // The sizing rule itself.
            assert_eq!(metadata_bytes_for(pool_bytes, chunk), pool_bytes / chunk * 64);

            // A real pool whose data region is exactly this size.
            let n = pool_bytes / chunk;
            let capacity = oracle_capacity_for(n, chunk);
            let store = new_store(&dir, &format!("img-{ci}-{pi}"), capacity, chunk);
            let geo = *store.pool().geometry();
            assert_eq!(geo.data_size_bytes(), pool_bytes);
            assert_eq!(geo.metadata_size_bytes(), pool_bytes / chunk * 64);
        }
    }
    println!("ACCEPTANCE 2 PASS: metadata bytes = chunks*64 exact over 3 chunk sizes x 3 pool sizes");
}

/// Criterion 3: block-layer utilization composed with two 10% filesystem
/// overheads lands at ≈0.799 for this design and in the 0.55–0.75 band for
/// the reserved-area baseline, within one percentage point.
#[test]
fn acceptance_03_utilization_composition() {
    let started = Instant::now();
    let rows = utilization_compare(
        &[
            ("gyges-store", pool_block_eta(64 * 1024)),
            ("reserved-area", 0.75),
        ],
        2,
        FS_OVERHEAD_DEFAULT,
    );
    let gyges = &rows[0];
    let baseline = &rows[1];
    assert!(
        (gyges.composed_eta - 0.799).abs() < 0.01,
        "composed {}",
        gyges.composed_eta
    );
    assert!((baseline.block_eta - 0.75).abs() < 0.01);
    assert!((baseline.composed_eta - 0.55).abs() < 0.01);

    // Randomized reserved-area geometries stay inside the band.
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    for _ in 0..100 {
        let vlen = rng.gen_range(1024u64..1 << 22);
        let pwd: u64 = rng.gen();
        let b = ReservedAreaBaseline::new(&pwd.to_le_bytes(), b"salt", vlen).unwrap();
        let block = b.outer_capacity_bytes() as f64 / b.vlen_bytes() as f64;
        assert!(block > 0.5 - 0.01 && block <= 0.75 + 0.01, "block {block}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 PASS: composed gyges={:.4} baseline block={:.2} composed={:.2} in {elapsed:?}",
        gyges.composed_eta, baseline.block_eta, baseline.composed_eta
    );
}

struct Workload4 {
    store: GygesStore,
    handles: Vec<VolumeHandle>,
    shadows: Vec<Vec<u8>>,
}

/// Shared workload for criteria 4 and 5: 1,000 randomized interleaved
/// writes across the outer and two hidden volumes of a 64 MiB image.
fn run_interleaved_workload(dir: &tempfile::TempDir, name: &str) -> Workload4 {
    let mut store = new_store(dir, name, 64 * MIB, 64 * 1024);
    store.create_outer().unwrap();
    store.create_hidden(b"hidden-one", 1, 16 * MIB).unwrap();
    store.create_hidden(b"hidden-two", 2, 16 * MIB).unwrap();
    let handles = vec![
        store.outer_handle().unwrap(),
        store.hidden_handle(b"hidden-one").unwrap(),
        store.hidden_handle(b"hidden-two").unwrap(),
    ];
    // Spans bounded so three volumes cannot exhaust 1022 chunks.
    let spans = [24 * MIB, 8 * MIB, 8 * MIB];
    let mut shadows: Vec<Vec<u8>> = spans.iter().map(|s| vec![0u8; *s as usize]).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(0xF161);
    let mut payload = vec![0u8; 64 * 1024];
    for _ in 0..1000 {
        let v = rng.gen_range(0..3);
        let len = rng.gen_range(1..=payload.len());
        let offset = rng.gen_range(0..spans[v] - len as u64);
        rng.fill_bytes(&mut payload[..len]);
        store
            .write(&handles[v], offset, &payload[..len])
            .unwrap_or_else(|e| panic!("write to volume {v} failed: {e}"));
        shadows[v][offset as usize..offset as usize + len].copy_from_slice(&payload[..len]);
    }
    Workload4 {
        store,
        handles,
        shadows,
    }
}

/// Criterion 4: after 1,000 interleaved writes, every volume reads back
/// byte-identical to its shadow model. Outer traffic can never alter
/// hidden bytes.
#[test]
fn acceptance_04_no_data_loss_across_volumes() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let w = run_interleaved_workload(&dir, "img");
    for v in 0..3 {
        let mut back = vec![0u8; w.shadows[v].len()];
        w.store.read(&w.handles[v], 0, &mut back).unwrap();
        assert_eq!(back, w.shadows[v], "volume {v} diverged from its shadow");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("ACCEPTANCE 4 PASS: 1000 interleaved writes, 3 volumes byte-identical to shadows in {elapsed:?}");
}

/// Criterion 5: the same workload leaves no physical chunk with two
/// owners and the owned/free partition intact.
#[test]
fn acceptance_05_exclusive_ownership_audit() {
    let dir = tempfile::tempdir().unwrap();
    let w = run_interleaved_workload(&dir, "img");
    let dups = w.store.audit_ownership();
    assert!(dups.is_empty(), "double-owned chunks: {dups:?}");
    println!("ACCEPTANCE 5 PASS: ownership audit clean after criterion-4 workload");
}

/// Criterion 6: the capacity comparison returns 0 against this design and
/// 1 against the reserved-area baseline, over 100 randomized geometries.
#[test]
fn acceptance_06_capacity_comparison_defense() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(66);
    for i in 0..100 {
        let capacity = rng.gen_range(2..=8) * MIB;
        let mut store = new_store(&dir, &format!("img-{i}"), capacity, 64 * 1024);
        store.create_outer().unwrap();
        let reported = store.outer_handle().unwrap().labeled_capacity();
        assert_eq!(capacity_compare(store.capacity_bytes(), reported).unwrap(), 0);

        let vlen = rng.gen_range(8u64..1 << 24);
        let pwd: u64 = rng.gen();
        let baseline = ReservedAreaBaseline::new(&pwd.to_le_bytes(), b"s", vlen).unwrap();
        assert_eq!(
            capacity_compare(baseline.vlen_bytes(), baseline.outer_capacity_bytes()).unwrap(),
            1
        );
    }
    println!("ACCEPTANCE 6 PASS: verdict 0 for spoofed store, 1 for baseline, 100 geometries");
}

/// Criterion 7: with level 0 engaged, audited bytes plus prior usage equal
/// the labeled capacity exactly and the full-storage error fires on the
/// first byte beyond, across 50 randomized (label, used_before) pairs.
#[test]
fn acceptance_07_fill_to_full_defense() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for i in 0..50 {
        let capacity = rng.gen_range(8..=64) * MIB;
        let mut store = new_store(&dir, &format!("img-{i}"), capacity, 64 * 1024);
        store.create_outer().unwrap();
        let outer = store.outer_handle().unwrap();
        let label = outer.labeled_capacity();
        assert_eq!(label, capacity);

        // Random pre-attack usage, byte-granular.
        let used_before = rng.gen_range(0..capacity / 2);
        if used_before > 0 {
            store
                .write(&outer, 0, &vec![0x5Au8; used_before as usize])
                .unwrap();
        }
        store.engage_level0().unwrap();

        let mut target = StoreFillTarget::new(&mut store).unwrap();
        let report = attack_fill_to_full(&mut target, 4 * 1024 * 1024, i).unwrap();
        let audited = report.audited_bytes.unwrap();
        assert_eq!(
            audited + used_before,
            label,
            "pair {i}: audited {audited} + used {used_before} != label {label}"
        );
        assert_eq!(report.verdict, 0);

        // First byte beyond the boundary errors with nothing accepted.
        let beyond = store.write(&outer, 0, &[1u8]);
        assert!(matches!(beyond, Err(Error::FullStorage { accepted: 0 })));
        std::fs::remove_file(dir.path().join(format!("img-{i}"))).unwrap();
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("ACCEPTANCE 7 PASS: 50 randomized fills hit label exactly, error on first byte beyond, in {elapsed:?}");
}

/// Criterion 8: 10,000 random (password, salt) pairs all place the
/// reserved-area offset inside (⌊0.5·vlen⌋, ⌊0.75·vlen⌋].
#[test]
fn acceptance_08_offset_band() {
    let vlen = 1u64 << 20;
    let mut rng = ChaCha20Rng::seed_from_u64(88);
    let mut pwd = [0u8; 12];
    let mut salt = [0u8; 16];
    for i in 0..10_000u32 {
        rng.fill_bytes(&mut pwd);
        rng.fill_bytes(&mut salt);
        let off = mobiflage_offset(&pwd, &salt, vlen).unwrap();
        assert!(
            off > vlen / 2 && off <= vlen * 3 / 4,
            "violation at sample {i}: offset {off}"
        );
    }
    println!("ACCEPTANCE 8 PASS: 10000 offsets inside (vlen/2, 3*vlen/4]");
}

fn gyges_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gyges"))
}

struct CliOutcome {
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    code: i32,
}

fn run_cli(args: &[&str], envs: &[(&str, &str)]) -> CliOutcome {
    let mut cmd = gyges_cmd();
    cmd.args(args)
        .env_remove("GYGES_PASSWORD")
        .env_remove("GYGES_HV_PASSWORD")
        .env_remove("GYGES_SECRET")
        .stdin(std::process::Stdio::null());
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn gyges");
    CliOutcome {
        stdout: out.stdout,
        stderr: out.stderr,
        code: out.status.code().unwrap_or(-1),
    }
}

/// Criterion 9: wrong password and nonexistent volume produce
/// byte-identical CLI responses, and an invalid token short-circuits with
/// identical behavior regardless of the password.
#[test]
fn acceptance_09_indistinguishable_failures() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("disk.img");
    let img_s = img.to_str().unwrap();
    let base = [("GYGES_PASSWORD", "fde-pw"), ("GYGES_SECRET", "svc")];

    let init = run_cli(
        &["init", img_s, "--size", "8MiB", "--kdf-iterations", "200"],
        &base,
    );
    assert_eq!(init.code, 0, "{}", String::from_utf8_lossy(&init.stderr));
    let created = run_cli(
        &["hv", "create", img_s, "--level", "1", "--size", "2MiB"],
        &[base[0], base[1], ("GYGES_HV_PASSWORD", "real-hidden-pw")],
    );
    assert_eq!(created.code, 0);

    let token_out = run_cli(&["token", "issue", "--app-id", "trigger"], &base);
    assert_eq!(token_out.code, 0);
    let token = String::from_utf8(token_out.stdout).unwrap().trim().to_string();

    // Wrong password for an existing volume vs a volume that never
    // existed: byte-identical outputs and exit codes.
    let wrong_pw = run_cli(
        &["mount", img_s, "--token", &token],
        &[base[0], base[1], ("GYGES_HV_PASSWORD", "wrong-guess")],
    );
    let absent = run_cli(
        &["mount", img_s, "--token", &token],
        &[base[0], base[1], ("GYGES_HV_PASSWORD", "never-created")],
    );
    assert_eq!(wrong_pw.code, absent.code);
    assert_eq!(wrong_pw.stdout, absent.stdout);
    assert_eq!(wrong_pw.stderr, absent.stderr);
    assert_ne!(wrong_pw.code, 0);

    // Invalid token: rejected identically whether or not the password
    // matches a volume, and before any password is needed at all.
    let bad_tok_right = run_cli(
        &["mount", img_s, "--token", "forged"],
        &[base[0], base[1], ("GYGES_HV_PASSWORD", "real-hidden-pw")],
    );
    let bad_tok_wrong = run_cli(
        &["mount", img_s, "--token", "forged"],
        &[base[0], base[1], ("GYGES_HV_PASSWORD", "whatever")],
    );
    let bad_tok_no_pw = run_cli(&["mount", img_s, "--token", "forged"], &base);
    assert_eq!(bad_tok_right.code, bad_tok_wrong.code);
    assert_eq!(bad_tok_right.stdout, bad_tok_wrong.stdout);
    assert_eq!(bad_tok_right.stderr, bad_tok_wrong.stderr);
    assert_eq!(bad_tok_right.code, bad_tok_no_pw.code);
    assert_eq!(bad_tok_right.stderr, bad_tok_no_pw.stderr);
    assert_ne!(bad_tok_right.code, wrong_pw.code);

    println!("ACCEPTANCE 9 PASS: failure surfaces byte-identical; token gate precedes name derivation");
}

/// Criterion 10: a session with timeout T is present at every tick before
/// its deadline and absent from the first tick at or past it.
#[test]
fn acceptance_10_auto_unmount_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = new_store(&dir, "img", 8 * MIB, 64 * 1024);
    store.create_outer().unwrap();
    store.create_hidden(b"hv", 1, 2 * MIB).unwrap();
    let registry = MountRegistry::new(b"secret");
    let token = registry
        .token_scheme()
        .issue("app", Duration::from_secs(600), 0);
    let timeout = Duration::from_secs(5);
    registry
        .mount_hidden(&store, b"hv", &token, timeout, Duration::ZERO, 0)
        .unwrap();

    for ms in [0u64, 1000, 2500, 4900, 4999] {
        registry.tick(Duration::from_millis(ms));
        assert_eq!(
            registry.mounted_names().len(),
            1,
            "absent before deadline at {ms} ms"
        );
    }
    let expired = registry.tick(Duration::from_millis(5000));
    assert_eq!(expired.len(), 1);
    assert!(registry.mounted_names().is_empty(), "present past deadline");
    println!("ACCEPTANCE 10 PASS: present until t<5s, absent at first tick with now >= deadline");
}

/// Criterion 11: a 64-byte random marker written through any volume never
/// appears in a byte scan of the raw image; 20 trials.
#[test]
fn acceptance_11_plaintext_absence() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = new_store(&dir, "img", 16 * MIB, 64 * 1024);
    store.create_outer().unwrap();
    store.create_hidden(b"hv-a", 1, 4 * MIB).unwrap();
    store.create_hidden(b"hv-b", 2, 4 * MIB).unwrap();
    let volumes = [
        store.outer_handle().unwrap(),
        store.hidden_handle(b"hv-a").unwrap(),
        store.hidden_handle(b"hv-b").unwrap(),
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(0x11AB);
    for trial in 0..20 {
        let mut marker = [0u8; 64];
        rng.fill_bytes(&mut marker);
        let vol = &volumes[trial % volumes.len()];
        let offset = rng.gen_range(0..3 * MIB);
        store.write(vol, offset, &marker).unwrap();
        store.sync().unwrap();
        let found = store.pool().device().raw().scan_raw(&marker).unwrap();
        assert_eq!(found, None, "trial {trial}: marker visible in raw image");
    }
    println!("ACCEPTANCE 11 PASS: 20/20 markers absent from raw image scans");
}

/// Criterion 12: 100 consecutive mount/unmount cycles complete without a
/// second FDE unlock or pool open, in under five seconds.
#[test]
fn acceptance_12_no_reboot_across_mount_cycles() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut store = new_store(&dir, "img", 8 * MIB, 64 * 1024);
    store.create_outer().unwrap();
    store.create_hidden(b"hv", 1, 2 * MIB).unwrap();
    let registry = MountRegistry::new(b"secret");
    let token = registry
        .token_scheme()
        .issue("app", Duration::from_secs(600), 0);

    for i in 0..100u64 {
        let now = Duration::from_secs(i);
        let handle = registry
            .mount_hidden(&store, b"hv", &token, Duration::from_secs(300), now, 0)
            .unwrap();
        registry.write(&mut store, handle, 0, &i.to_le_bytes()).unwrap();
        registry.unmount(handle).unwrap();
    }
    let counters = store.counters();
    assert_eq!(counters.fde_opens, 1, "FDE was re-unlocked");
    assert_eq!(counters.pool_opens, 1, "pool was re-opened");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("ACCEPTANCE 12 PASS: 100 mount cycles, fde_opens=1 pool_opens=1, in {elapsed:?}");
}
