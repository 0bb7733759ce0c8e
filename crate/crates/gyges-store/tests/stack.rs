//! Cross-layer integration: volume isolation under interleaved traffic and
//! layering sanity for the bench harness.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use gyges_store::bench::{run_bench, RawTarget, VolumeTarget, Workload};
use gyges_store::block_store::PhysicalVolume;
use gyges_store::crypto::{FdeParams, KeySize};
use gyges_store::store::{GygesStore, StoreParams};

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
fn interleaved_writes_never_cross_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut store =
        GygesStore::init(&dir.path().join("img"), 16 * MIB, b"pw", fast_params()).unwrap();
    store.create_outer().unwrap();
    store.create_hidden(b"hv-one", 1, 4 * MIB).unwrap();
    store.create_hidden(b"hv-two", 2, 4 * MIB).unwrap();

    let handles = [
        store.outer_handle().unwrap(),
        store.hidden_handle(b"hv-one").unwrap(),
        store.hidden_handle(b"hv-two").unwrap(),
    ];
    // Shadow ranges sized so the pool cannot exhaust mid-test.
    let spans = [6 * MIB, 3 * MIB, 3 * MIB];
    let mut shadows: Vec<Vec<u8>> = spans.iter().map(|s| vec![0u8; *s as usize]).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(0xD15C);
    let mut payload = vec![0u8; 96 * 1024];
    for _ in 0..200 {
        let v = rng.gen_range(0..3);
        let len = rng.gen_range(1..payload.len());
        let offset = rng.gen_range(0..spans[v] - len as u64);
        rng.fill_bytes(&mut payload[..len]);
        store.write(&handles[v], offset, &payload[..len]).unwrap();
        shadows[v][offset as usize..offset as usize + len].copy_from_slice(&payload[..len]);
    }

    for v in 0..3 {
        let mut back = vec![0u8; spans[v] as usize];
        store.read(&handles[v], 0, &mut back).unwrap();
        assert_eq!(back, shadows[v], "volume {v} diverged from its shadow");
    }
    assert!(store.audit_ownership().is_empty());
}

// Rounds are interleaved raw/outer so machine load during the test run
// biases both targets alike; the median per-round ratio is compared.
#[test]
fn write_throughput_never_improves_up_the_stack() {
    let dir = tempfile::tempdir().unwrap();

    let raw_vol = PhysicalVolume::create(&dir.path().join("raw.img"), 8 * MIB).unwrap();
    let mut store =
        GygesStore::init(&dir.path().join("stack.img"), 8 * MIB, b"pw", fast_params()).unwrap();
    store.create_outer().unwrap();
    let outer = store.outer_handle().unwrap();

    let mut ratios = Vec::new();
    for round in 0..5u64 {
        let mut raw_target = RawTarget::new(&raw_vol);
        let raw = run_bench(
            &mut raw_target,
            "raw",
            Workload::SeqWrite,
            4 * MIB,
            256 * 1024,
            1,
            round,
        )
        .unwrap();
        let mut outer_target = VolumeTarget::new(&mut store, outer.clone());
        let outer_res = run_bench(
            &mut outer_target,
            "outer",
            Workload::SeqWrite,
            4 * MIB,
            256 * 1024,
            1,
            round,
        )
        .unwrap();
        ratios.push(outer_res.throughput_bps / raw.throughput_bps);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    assert!(
        median <= 1.5,
        "outer/raw median write ratio {median:.2} exceeds noise bound (ratios {ratios:?})"
    );
}
