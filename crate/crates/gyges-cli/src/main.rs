//! Operator front end for the deniable storage engine.
//!
//! Subcommands map onto the operator workflow: create an image (`init`),
//! unlock it so the outer volume is available (`unlock`), register hidden
//! volumes (`hv create`), mount them with a bearer token (`mount`, `serve`),
//! do IO (`read`/`write`), arm the fill defense (`level0 engage`), and run
//! the adversary and measurement harnesses (`attack`, `bench`, `stats`,
//! `utilization`).
//!
//! Passwords never travel in argv: the FDE password comes from
//! `GYGES_PASSWORD` and hidden-volume passwords from `GYGES_HV_PASSWORD`
//! (falling back to a stdin prompt). The mount service secret comes from
//! `GYGES_SECRET` or the config file. Exit codes: 0 success, 2 usage, then
//! one code per error family (see `exit_code_for`).

use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use gyges_store::adversary::{
    attack_capacity_compare, attack_fill_to_full, pool_block_eta, utilization_compare,
    ReservedAreaBaseline, StoreFillTarget, FILL_BATCH_DEFAULT, FS_OVERHEAD_DEFAULT,
};
use gyges_store::bench::{
    format_table, run_bench, to_csv, BenchResult, FdeTarget, RawTarget, VolumeTarget, Workload,
};
use gyges_store::block_store::{MappingType, PhysicalVolume};
use gyges_store::crypto::{EncryptedDevice, FdeParams, KeySize, KDF_ITERATIONS_DEFAULT};
use gyges_store::error::Error;
use gyges_store::mount::{MountRegistry, SessionHandle};
use gyges_store::store::{GygesStore, StoreParams, VolumeHandle};
use gyges_store::thin_pool::CHUNK_SIZE_DEFAULT;
use gyges_store::volumes::NAME_TRIM_DEFAULT;

const ENV_PASSWORD: &str = "GYGES_PASSWORD";
const ENV_HV_PASSWORD: &str = "GYGES_HV_PASSWORD";
const ENV_SECRET: &str = "GYGES_SECRET";
const MOUNT_TIMEOUT_DEFAULT: u64 = 300;

#[derive(Parser)]
#[command(name = "gyges", version, about = "Deniable thin-provisioned storage")]
struct Cli {
    /// Config file with key=value lines (flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a fresh image with FDE and an empty pool.
    Init {
        image: PathBuf,
        /// Data capacity, e.g. 64MiB.
        #[arg(long)]
        size: String,
        #[arg(long)]
        chunk_size: Option<String>,
        #[arg(long)]
        kdf_iterations: Option<u32>,
        /// Master key length: 128 or 256.
        #[arg(long, default_value_t = 128)]
        key_bits: u32,
    },
    /// Unlock an image; the outer volume is created on first unlock and is
    /// available immediately.
    Unlock { image: Option<PathBuf> },
    /// Pool statistics and volume labels.
    Stats {
        image: Option<PathBuf>,
        /// Print the device-mapping 5-tuples of a volume (outer|hidden|null).
        #[arg(long)]
        mapping: Option<String>,
    },
    /// Hidden volume operations.
    Hv {
        #[command(subcommand)]
        cmd: HvCommand,
    },
    /// Mount a hidden volume for one process lifetime (see `serve` for
    /// long-lived sessions).
    Mount {
        image: Option<PathBuf>,
        #[arg(long)]
        token: String,
        /// Auto-unmount timeout in seconds.
        #[arg(long)]
        timeout: Option<u64>,
    },
    /// Write to a volume (outer|hidden|null).
    Write {
        image: Option<PathBuf>,
        #[arg(long)]
        volume: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// Hex payload; mutually exclusive with --input.
        #[arg(long)]
        data_hex: Option<String>,
        /// Read the payload from a file.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Read from a volume (outer|hidden|null).
    Read {
        image: Option<PathBuf>,
        #[arg(long)]
        volume: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        len: u64,
        /// Write bytes to a file instead of hex on stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Level-0 defense control.
    Level0 {
        #[command(subcommand)]
        cmd: Level0Command,
    },
    /// Run an attack and print its report record.
    Attack {
        #[command(subcommand)]
        cmd: AttackCommand,
    },
    /// IO measurement on scratch images.
    Bench(BenchArgs),
    /// Issue a mount token under the service secret.
    Token {
        #[command(subcommand)]
        cmd: TokenCommand,
    },
    /// Line-driven session: keeps one store and mount registry alive, with
    /// the auto-unmount tick running in the background.
    Serve { image: Option<PathBuf> },
    /// Utilization comparison table.
    Utilization {
        image: Option<PathBuf>,
        /// Injected per-filesystem overhead.
        #[arg(long, default_value_t = FS_OVERHEAD_DEFAULT)]
        fs_overhead: f64,
        /// Number of filesystems composed into the report.
        #[arg(long, default_value_t = 2)]
        fs_count: u32,
    },
}

#[derive(Subcommand)]
enum HvCommand {
    /// Register a hidden volume under its password-derived name.
    Create {
        image: Option<PathBuf>,
        /// Deniability level (1 or higher).
        #[arg(long)]
        level: u32,
        /// Labeled capacity, e.g. 8MiB.
        #[arg(long)]
        size: String,
    },
}

#[derive(Subcommand)]
enum Level0Command {
    /// Snapshot used capacity and start absorbing overflow writes.
    Engage { image: Option<PathBuf> },
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Compare physical capacity with the reported outer capacity.
    Capacity {
        image: Option<PathBuf>,
        /// Attack the reserved-area baseline instead of an image.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        vlen_sectors: Option<u64>,
    },
    /// Fill the outer volume until a full-storage condition.
    Fill {
        image: Option<PathBuf>,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        vlen_sectors: Option<u64>,
        /// Pre-attack usage for the baseline, e.g. 4MiB.
        #[arg(long)]
        used: Option<String>,
        /// Engage level 0 before attacking.
        #[arg(long)]
        engage_level0: bool,
        #[arg(long)]
        batch_size: Option<String>,
        #[arg(long, default_value_t = 0x6727)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TokenCommand {
    Issue {
        #[arg(long)]
        app_id: String,
        /// Validity in seconds.
        #[arg(long, default_value_t = 3600)]
        ttl: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Scratch image path prefix; per-target images are created fresh.
    #[arg(long)]
    scratch: PathBuf,
    /// Comma-separated targets: raw,fde,outer,hidden (or "all").
    #[arg(long, default_value = "all")]
    target: String,
    /// Comma-separated workloads: seq_read,seq_write,rnd_read,rnd_write.
    #[arg(long, default_value = "seq_write,seq_read")]
    workload: String,
    #[arg(long, default_value = "64MiB")]
    total_bytes: String,
    #[arg(long, default_value = "4MiB")]
    block_size: String,
    #[arg(long, default_value_t = 3)]
    trials: u32,
    #[arg(long, default_value_t = 0xBE7C)]
    seed: u64,
    /// Emit CSV instead of the text table.
    #[arg(long)]
    csv: bool,
}

/// key=value config file contents.
#[derive(Default, Clone)]
struct Config {
    image_path: Option<PathBuf>,
    chunk_size: Option<u64>,
    name_trim_b: Option<usize>,
    mount_timeout: Option<u64>,
    kdf_iterations: Option<u32>,
    secret: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code_for(&e),
            message: e.to_string(),
        }
    }
}

/// Error-family exit codes (10–19). Wrong hidden password and nonexistent
/// hidden volume are the same family and the same message by construction.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::BadImage => 10,
        Error::BadPassword | Error::EmptyPassword => 11,
        Error::InvalidToken => 12,
        Error::UnknownVolume | Error::StaleHandle | Error::AlreadyMounted => 13,
        Error::FullStorage { .. } => 14,
        Error::PoolExhausted { .. } => 15,
        Error::PathExists(_)
        | Error::FooterAlreadyPresent
        | Error::OuterExists
        | Error::NameCollision
        | Error::VolumeTableFull => 16,
        Error::OutOfRange { .. }
        | Error::UnmappedSector(_)
        | Error::AlreadyMapped
        | Error::OutOfLabelRange { .. }
        | Error::CapacityNotSectorAligned(_)
        | Error::CapacityTooSmall { .. }
        | Error::BadChunkSize(_)
        | Error::DeviceTooSmall { .. }
        | Error::BadTrimLength(_)
        | Error::BadLevel(_)
        | Error::VlenTooSmall(_)
        | Error::NoOuterVolume => 17,
        Error::CorruptFooter | Error::CorruptPool => 18,
        Error::InconsistentInputs { .. }
        | Error::ZeroTrials
        | Error::TargetTooSmall { .. }
        | Error::ReadbackMismatch(_)
        | Error::TargetReadOnly => 19,
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::ExitCode::from(f.code)
        }
    }
}

fn parse_size(s: &str) -> Result<u64, Failure> {
    let s = s.trim();
    let (digits, mult) = if let Some(d) = s.strip_suffix("GiB") {
        (d, 1024 * 1024 * 1024)
    } else if let Some(d) = s.strip_suffix("MiB") {
        (d, 1024 * 1024)
    } else if let Some(d) = s.strip_suffix("KiB") {
        (d, 1024)
    } else if let Some(d) = s.strip_suffix('B') {
        (d, 1)
    } else {
        (s, 1)
    };
    digits
        .trim()
        .parse::<u64>()
        .map(|n| n * mult)
        .map_err(|_| Failure::usage(format!("bad size: {s}")))
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let mut cfg = Config::default();
    let Some(path) = path else {
        return Ok(cfg);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 10,
        message: format!("config {}: {e}", path.display()),
    })?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Failure::usage(format!(
                "config line {}: expected key=value",
                lineno + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "image_path" => cfg.image_path = Some(PathBuf::from(value)),
            "chunk_size" => cfg.chunk_size = Some(parse_size(value)?),
            "name_trim_b" => {
                cfg.name_trim_b = Some(
                    value
                        .parse()
                        .map_err(|_| Failure::usage(format!("config name_trim_b: {value}")))?,
                )
            }
            "mount_timeout" => {
                cfg.mount_timeout = Some(
                    value
                        .parse()
                        .map_err(|_| Failure::usage(format!("config mount_timeout: {value}")))?,
                )
            }
            "kdf_iterations" => {
                cfg.kdf_iterations = Some(
                    value
                        .parse()
                        .map_err(|_| Failure::usage(format!("config kdf_iterations: {value}")))?,
                )
            }
            "secret" => cfg.secret = Some(value.to_string()),
            other => return Err(Failure::usage(format!("config: unknown key {other}"))),
        }
    }
    Ok(cfg)
}

fn prompt_secret(label: &str) -> Result<String, Failure> {
    eprint!("{label}: ");
    std::io::stderr().flush().ok();
    let mut line = String::new();
    std::io::stdin().read_line(&mut line).map_err(|e| Failure {
        code: 10,
        message: e.to_string(),
    })?;
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn fde_password() -> Result<Vec<u8>, Failure> {
    match std::env::var(ENV_PASSWORD) {
        Ok(p) => Ok(p.into_bytes()),
        Err(_) => Ok(prompt_secret("FDE password")?.into_bytes()),
    }
}

fn hv_password() -> Result<Vec<u8>, Failure> {
    match std::env::var(ENV_HV_PASSWORD) {
        Ok(p) => Ok(p.into_bytes()),
        Err(_) => Ok(prompt_secret("hidden volume password")?.into_bytes()),
    }
}

fn service_secret(cfg: &Config) -> Result<Vec<u8>, Failure> {
    if let Ok(s) = std::env::var(ENV_SECRET) {
        return Ok(s.into_bytes());
    }
    if let Some(s) = &cfg.secret {
        return Ok(s.clone().into_bytes());
    }
    Err(Failure::usage(format!(
        "no service secret: set {ENV_SECRET} or `secret=` in the config"
    )))
}

fn image_path(cli_image: Option<PathBuf>, cfg: &Config) -> Result<PathBuf, Failure> {
    cli_image
        .or_else(|| cfg.image_path.clone())
        .ok_or_else(|| Failure::usage("no image path given (argument or config image_path)"))
}

fn name_trim(cfg: &Config) -> usize {
    cfg.name_trim_b.unwrap_or(NAME_TRIM_DEFAULT)
}

fn open_store(image: Option<PathBuf>, cfg: &Config) -> Result<GygesStore, Failure> {
    let path = image_path(image, cfg)?;
    let password = fde_password()?;
    Ok(GygesStore::open(&path, &password, name_trim(cfg))?)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs()
}

fn volume_handle(store: &GygesStore, which: &str) -> Result<VolumeHandle, Failure> {
    match which {
        "outer" => Ok(store.outer_handle()?),
        "null" => Ok(store.null_sink_handle()),
        "hidden" => {
            let pw = hv_password()?;
            Ok(store.hidden_handle(&pw)?)
        }
        other => Err(Failure::usage(format!(
            "unknown volume {other} (expected outer|hidden|null)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Init {
            image,
            size,
            chunk_size,
            kdf_iterations,
            key_bits,
        } => {
            let capacity = parse_size(&size)?;
            let chunk = match chunk_size {
                Some(s) => parse_size(&s)?,
                None => cfg.chunk_size.unwrap_or(CHUNK_SIZE_DEFAULT),
            };
            let key_size = match key_bits {
                128 => KeySize::Bits128,
                256 => KeySize::Bits256,
                other => {
                    return Err(Failure::usage(format!(
                        "key-bits must be 128 or 256, got {other}"
                    )))
                }
            };
            let params = StoreParams {
                chunk_size: chunk,
                fde: FdeParams {
                    kdf_iterations: kdf_iterations
                        .or(cfg.kdf_iterations)
                        .unwrap_or(KDF_ITERATIONS_DEFAULT),
                    key_size,
                },
                name_trim: name_trim(&cfg),
            };
            let password = fde_password()?;
            let store = GygesStore::init(&image, capacity, &password, params)?;
            let stats = store.stats();
            println!(
                "initialized {} capacity={} chunks={} chunk_size={}",
                image.display(),
                capacity,
                stats.total_chunks,
                chunk
            );
            Ok(())
        }
        Command::Unlock { image } => {
            let mut store = open_store(image, &cfg)?;
            let created = store.ensure_outer()?;
            let outer = store.outer_handle()?;
            println!(
                "unlocked; outer volume mounted label={} created={}",
                outer.labeled_capacity(),
                created
            );
            Ok(())
        }
        Command::Stats { image, mapping } => {
            let store = open_store(image, &cfg)?;
            cmd_stats(&store, mapping.as_deref())
        }
        Command::Hv { cmd } => match cmd {
            HvCommand::Create { image, level, size } => {
                let mut store = open_store(image, &cfg)?;
                let label = parse_size(&size)?;
                let pw = hv_password()?;
                let name = store.create_hidden(&pw, level, label)?;
                println!("created hidden volume {name} label={label}");
                Ok(())
            }
        },
        Command::Mount {
            image,
            token,
            timeout,
        } => {
            let secret = service_secret(&cfg)?;
            let registry = MountRegistry::new(&secret);
            // Token gate comes first: a bad token is rejected before the
            // password is even read.
            registry.token_scheme().verify(&token, now_unix())?;
            let store = open_store(image, &cfg)?;
            let timeout = Duration::from_secs(
                timeout.or(cfg.mount_timeout).unwrap_or(MOUNT_TIMEOUT_DEFAULT),
            );
            let pw = hv_password()?;
            let handle =
                registry.mount_hidden(&store, &pw, &token, timeout, Duration::ZERO, now_unix())?;
            println!(
                "mounted session={} timeout={}s (session ends with this process; use serve for persistent sessions)",
                handle.raw(),
                timeout.as_secs()
            );
            Ok(())
        }
        Command::Write {
            image,
            volume,
            offset,
            data_hex,
            input,
        } => {
            let mut store = open_store(image, &cfg)?;
            let vol = volume_handle(&store, &volume)?;
            let data = match (data_hex, input) {
                (Some(h), None) => hex::decode(h.trim())
                    .map_err(|e| Failure::usage(format!("bad hex payload: {e}")))?,
                (None, Some(p)) => std::fs::read(p).map_err(Error::from)?,
                _ => {
                    return Err(Failure::usage(
                        "exactly one of --data-hex or --input is required",
                    ))
                }
            };
            let n = store.write(&vol, offset, &data)?;
            store.sync()?;
            println!("wrote {n} bytes at {offset}");
            Ok(())
        }
        Command::Read {
            image,
            volume,
            offset,
            len,
            output,
        } => {
            let store = open_store(image, &cfg)?;
            let vol = volume_handle(&store, &volume)?;
            let mut buf = vec![0u8; len as usize];
            store.read(&vol, offset, &mut buf)?;
            match output {
                Some(p) => std::fs::write(p, &buf).map_err(Error::from)?,
                None => println!("{}", hex::encode(&buf)),
            }
            Ok(())
        }
        Command::Level0 { cmd } => match cmd {
            Level0Command::Engage { image } => {
                let mut store = open_store(image, &cfg)?;
                store.engage_level0()?;
                let fill = store.fill_accounting();
                println!("level0 engaged used_before={}", fill.used_before);
                Ok(())
            }
        },
        Command::Attack { cmd } => cmd_attack(cmd, &cfg),
        Command::Bench(args) => cmd_bench(args, &cfg),
        Command::Token { cmd } => match cmd {
            TokenCommand::Issue { app_id, ttl } => {
                let secret = service_secret(&cfg)?;
                let registry = MountRegistry::new(&secret);
                let token = registry
                    .token_scheme()
                    .issue(&app_id, Duration::from_secs(ttl), now_unix());
                println!("{token}");
                Ok(())
            }
        },
        Command::Serve { image } => cmd_serve(image, &cfg),
        Command::Utilization {
            image,
            fs_overhead,
            fs_count,
        } => {
            let chunk = match &image {
                Some(_) => open_store(image.clone(), &cfg)?.pool().chunk_size(),
                None => cfg.chunk_size.unwrap_or(CHUNK_SIZE_DEFAULT),
            };
            let rows = utilization_compare(
                &[
                    ("gyges-store", pool_block_eta(chunk)),
                    ("reserved-area", 0.75),
                ],
                fs_count,
                fs_overhead,
            );
            println!("design        block_eta  composed_eta");
            for r in rows {
                println!(
                    "{:<13} {:<10.6} {:.6}",
                    r.design, r.block_eta, r.composed_eta
                );
            }
            Ok(())
        }
    }
}

fn cmd_stats(store: &GygesStore, mapping: Option<&str>) -> Result<(), Failure> {
    let stats = store.stats();
    println!("capacity_bytes={}", store.capacity_bytes());
    println!("chunk_size={}", store.pool().chunk_size());
    println!("total_chunks={}", stats.total_chunks);
    println!("owned_chunks={}", stats.owned_chunks);
    println!("free_chunks={}", stats.free_chunks);
    println!("eta={:.6}", stats.eta);
    match store.outer_handle() {
        Ok(outer) => println!("outer_label={}", outer.labeled_capacity()),
        Err(_) => println!("outer_label=-"),
    }
    println!("volumes={}", store.volume_entries().len());
    let fill = store.fill_accounting();
    println!("level0_engaged={}", fill.engaged);
    if fill.engaged {
        println!("used_before={}", fill.used_before);
        println!("recorded={}", fill.recorded);
    }
    if let Some(which) = mapping {
        let vol = volume_handle(store, which)?;
        for t in store.mapping_table(&vol) {
            let kind = match t.mapping_type {
                MappingType::Linear => "linear",
                MappingType::Thin => "thin",
                MappingType::Null => "null",
            };
            println!(
                "map {} {} {} {} {}",
                t.logical_offset_sectors,
                t.length_sectors,
                kind,
                t.target_device.0,
                t.physical_offset_sectors
            );
        }
    }
    Ok(())
}

fn cmd_attack(cmd: AttackCommand, cfg: &Config) -> Result<(), Failure> {
    match cmd {
        AttackCommand::Capacity {
            image,
            baseline,
            vlen_sectors,
        } => {
            let report = if baseline {
                let vlen = vlen_sectors
                    .ok_or_else(|| Failure::usage("--baseline needs --vlen-sectors"))?;
                let pw = hv_password()?;
                let target = ReservedAreaBaseline::new(&pw, &[0u8; 16], vlen)?;
                attack_capacity_compare(target.vlen_bytes(), target.outer_capacity_bytes())?
            } else {
                let store = open_store(image, cfg)?;
                let outer = store.outer_handle()?;
                attack_capacity_compare(store.capacity_bytes(), outer.labeled_capacity())?
            };
            println!("{}", report.record_line());
            Ok(())
        }
        AttackCommand::Fill {
            image,
            baseline,
            vlen_sectors,
            used,
            engage_level0,
            batch_size,
            seed,
        } => {
            let batch = match batch_size {
                Some(s) => parse_size(&s)? as usize,
                None => FILL_BATCH_DEFAULT,
            };
            let report = if baseline {
                let vlen = vlen_sectors
                    .ok_or_else(|| Failure::usage("--baseline needs --vlen-sectors"))?;
                let pw = hv_password()?;
                let mut target = ReservedAreaBaseline::new(&pw, &[0u8; 16], vlen)?;
                if let Some(u) = used {
                    target.set_used(parse_size(&u)?);
                }
                attack_fill_to_full(&mut target, batch, seed)?
            } else {
                let mut store = open_store(image, cfg)?;
                store.ensure_outer()?;
                if engage_level0 {
                    store.engage_level0()?;
                }
                let mut target = StoreFillTarget::new(&mut store)?;
                attack_fill_to_full(&mut target, batch, seed)?
            };
            println!("{}", report.record_line());
            Ok(())
        }
    }
}

fn cmd_bench(args: BenchArgs, cfg: &Config) -> Result<(), Failure> {
    let total = parse_size(&args.total_bytes)?;
    let block = parse_size(&args.block_size)?;
    let targets: Vec<&str> = if args.target == "all" {
        vec!["raw", "fde", "outer", "hidden"]
    } else {
        args.target.split(',').collect()
    };
    let workloads: Vec<Workload> = args
        .workload
        .split(',')
        .map(|w| Workload::parse(w).ok_or_else(|| Failure::usage(format!("unknown workload {w}"))))
        .collect::<Result<_, _>>()?;

    // Scratch stack sized to fit the run above the pool metadata.
    let capacity = total + 16 * 1024 * 1024;
    let password = fde_password()?;
    let fde = FdeParams {
        kdf_iterations: cfg.kdf_iterations.unwrap_or(KDF_ITERATIONS_DEFAULT),
        key_size: KeySize::Bits128,
    };
    let mut rows: Vec<BenchResult> = Vec::new();

    for (i, target) in targets.iter().enumerate() {
        let path = args.scratch.with_extension(format!("{i}.img"));
        if path.exists() {
            return Err(Error::PathExists(path).into());
        }
        let run_one = |t: &mut dyn gyges_store::bench::BenchIo,
                       name: &str,
                       rows: &mut Vec<BenchResult>|
         -> Result<(), Failure> {
            for &workload in &workloads {
                rows.push(run_bench(
                    t, name, workload, total, block, args.trials, args.seed,
                )?);
            }
            Ok(())
        };
        let result = match *target {
            "raw" => {
                let vol = PhysicalVolume::create(&path, capacity)?;
                run_one(&mut RawTarget::new(&vol), "raw", &mut rows)
            }
            "fde" => {
                let vol = PhysicalVolume::create(&path, capacity)?;
                let dev = EncryptedDevice::init(vol, &password, fde)?;
                run_one(&mut FdeTarget::new(&dev), "fde", &mut rows)
            }
            "outer" | "hidden" => {
                let params = StoreParams {
                    chunk_size: cfg.chunk_size.unwrap_or(CHUNK_SIZE_DEFAULT),
                    fde,
                    name_trim: name_trim(cfg),
                };
                let mut store = GygesStore::init(&path, capacity, &password, params)?;
                let vol = if *target == "outer" {
                    store.create_outer()?;
                    store.outer_handle()?
                } else {
                    store.create_hidden(b"bench-hidden", 1, capacity)?;
                    store.hidden_handle(b"bench-hidden")?
                };
                run_one(&mut VolumeTarget::new(&mut store, vol), target, &mut rows)
            }
            other => Err(Failure::usage(format!("unknown target {other}"))),
        };
        std::fs::remove_file(&path).ok();
        result?;
    }

    if args.csv {
        print!("{}", to_csv(&rows));
    } else {
        print!("{}", format_table(&rows));
    }
    Ok(())
}

fn cmd_serve(image: Option<PathBuf>, cfg: &Config) -> Result<(), Failure> {
    let secret = service_secret(cfg)?;
    let mut store = open_store(image, cfg)?;
    store.ensure_outer()?;
    let registry = Arc::new(MountRegistry::new(&secret));
    let epoch = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));

    let ticker = {
        let registry = Arc::clone(&registry);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(Duration::from_millis(100));
                for name in registry.tick(epoch.elapsed()) {
                    println!("event auto-unmount {name}");
                }
            }
        })
    };

    println!("ready");
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line.map_err(Error::from)?;
        match serve_command(line.split_whitespace().collect::<Vec<_>>().as_slice(),
            &mut store, &registry, epoch)
        {
            Ok(Some(msg)) => println!("ok {msg}"),
            Ok(None) => break,
            Err(f) => println!("error {} {}", f.code, f.message),
        }
    }

    stop.store(true, Ordering::Relaxed);
    ticker.join().ok();
    store.sync()?;
    Ok(())
}

fn serve_command(
    parts: &[&str],
    store: &mut GygesStore,
    registry: &MountRegistry,
    epoch: Instant,
) -> Result<Option<String>, Failure> {
    match parts {
        [] => Ok(Some(String::new())),
        ["exit"] => Ok(None),
        ["mount", rest @ ..] => {
            let (timeout, token, pw_hex) = match rest {
                [timeout, token] => (timeout, token, None),
                [timeout, token, pw] => (timeout, token, Some(*pw)),
                _ => {
                    return Err(Failure::usage(
                        "mount <timeout-secs> <token> [password-hex]",
                    ))
                }
            };
            let timeout: f64 = timeout.parse().map_err(|_| Failure::usage("bad timeout"))?;
            let password = match pw_hex {
                Some(h) => hex::decode(h).map_err(|e| Failure::usage(format!("bad hex: {e}")))?,
                None => hv_password()?,
            };
            let handle = registry.mount_hidden(
                store,
                &password,
                token,
                Duration::from_secs_f64(timeout),
                epoch.elapsed(),
                now_unix(),
            )?;
            Ok(Some(format!("mounted {}", handle.raw())))
        }
        ["unmount", id] => {
            registry.unmount(parse_handle(id)?)?;
            Ok(Some("unmounted".into()))
        }
        ["mounts"] => Ok(Some(format!(
            "mounts {}",
            registry.mounted_names().join(",")
        ))),
        ["write", which, offset, hex_data] => {
            let offset: u64 = offset.parse().map_err(|_| Failure::usage("bad offset"))?;
            let data = hex::decode(hex_data).map_err(|e| Failure::usage(format!("bad hex: {e}")))?;
            let n = match *which {
                "outer" => {
                    let outer = store.outer_handle()?;
                    store.write(&outer, offset, &data)?
                }
                id => registry.write(store, parse_handle(id)?, offset, &data)?,
            };
            Ok(Some(format!("wrote {n}")))
        }
        ["read", which, offset, len] => {
            let offset: u64 = offset.parse().map_err(|_| Failure::usage("bad offset"))?;
            let len: usize = len.parse().map_err(|_| Failure::usage("bad len"))?;
            let mut buf = vec![0u8; len];
            match *which {
                "outer" => {
                    let outer = store.outer_handle()?;
                    store.read(&outer, offset, &mut buf)?;
                }
                id => registry.read(store, parse_handle(id)?, offset, &mut buf)?,
            }
            Ok(Some(hex::encode(buf)))
        }
        ["level0"] => {
            store.engage_level0()?;
            Ok(Some(format!(
                "level0 engaged used_before={}",
                store.fill_accounting().used_before
            )))
        }
        ["stats"] => {
            let s = store.stats();
            Ok(Some(format!(
                "chunks total={} owned={} free={} eta={:.6}",
                s.total_chunks, s.owned_chunks, s.free_chunks, s.eta
            )))
        }
        _ => Err(Failure::usage("unknown command")),
    }
}

fn parse_handle(s: &str) -> Result<SessionHandle, Failure> {
    let id: u64 = s.parse().map_err(|_| Failure::usage("bad session handle"))?;
    Ok(SessionHandle::from_raw(id))
}
