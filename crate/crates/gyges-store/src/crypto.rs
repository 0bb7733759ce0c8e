//! Full-disk-encryption layer over the physical volume.
//!
//! Every data sector is AES-CBC-encrypted under a random master key with a
//! per-sector ESSIV:SHA256 IV. The master key is wrapped by a PBKDF2-derived
//! key and stored in the crypto footer at the image tail together with the
//! KDF salt, iteration count, and a check value that verifies a supplied
//! password without ever storing the master key in plaintext.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::block_store::{PhysicalVolume, SectorBuf, FOOTER_SIZE, SECTOR_SIZE};
use crate::error::{Error, Result};

/// Default PBKDF2-HMAC-SHA256 iteration count for the password KDF.
pub const KDF_ITERATIONS_DEFAULT: u32 = 10_000;

const FOOTER_MAGIC: &[u8; 8] = b"GYGSFT1\0";
const FOOTER_VERSION: u32 = 1;
/// Reserved sector index for the key-check value, outside any data range.
const CHECK_SECTOR: u64 = u64::MAX;
const CHECK_PLAINTEXT_UNIT: &[u8; 16] = b"GYGES-FDE-CHECK\0";

const AES_BLOCK: usize = 16;

/// Master key length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySize {
    Bits128,
    Bits256,
}

impl KeySize {
    pub fn byte_len(self) -> usize {
        match self {
            KeySize::Bits128 => 16,
            KeySize::Bits256 => 32,
        }
    }
}

/// Parameters for `EncryptedDevice::init`.
#[derive(Debug, Clone, Copy)]
pub struct FdeParams {
    pub kdf_iterations: u32,
    pub key_size: KeySize,
}

impl Default for FdeParams {
    fn default() -> Self {
        Self {
            kdf_iterations: KDF_ITERATIONS_DEFAULT,
            key_size: KeySize::Bits128,
        }
    }
}

enum BlockCipher {
    Aes128(Aes128),
    Aes256(Aes256),
}

impl BlockCipher {
    fn new(key: &[u8]) -> Self {
        match key.len() {
            16 => BlockCipher::Aes128(Aes128::new(GenericArray::from_slice(key))),
            32 => BlockCipher::Aes256(Aes256::new(GenericArray::from_slice(key))),
            n => panic!("unsupported key length {n}"),
        }
    }

    fn encrypt_block(&self, block: &mut [u8; AES_BLOCK]) {
        let ga = GenericArray::from_mut_slice(block);
        match self {
            BlockCipher::Aes128(c) => c.encrypt_block(ga),
            BlockCipher::Aes256(c) => c.encrypt_block(ga),
        }
    }

    fn decrypt_block(&self, block: &mut [u8; AES_BLOCK]) {
        let ga = GenericArray::from_mut_slice(block);
        match self {
            BlockCipher::Aes128(c) => c.decrypt_block(ga),
            BlockCipher::Aes256(c) => c.decrypt_block(ga),
        }
    }
}

/// Per-sector AES-CBC cipher with ESSIV:SHA256 IV generation.
///
/// Deterministic by design: the same (key, sector, plaintext) always yields
/// the same ciphertext, matching the FDE model. CBC chains within each
/// sector independently.
pub struct SectorCipher {
    data: BlockCipher,
    essiv: Aes256,
}

impl SectorCipher {
    /// Build a cipher from a 16- or 32-byte key. The ESSIV cipher is keyed
    /// by SHA-256 of the data key.
    pub fn new(key: &[u8]) -> Self {
        let digest = Sha256::digest(key);
        Self {
            data: BlockCipher::new(key),
            essiv: Aes256::new(GenericArray::from_slice(&digest)),
        }
    }

    /// ESSIV IV: AES-encrypt the little-endian sector index under the
    /// hashed-key cipher.
    fn iv_for(&self, sector: u64) -> [u8; AES_BLOCK] {
        let mut block = [0u8; AES_BLOCK];
        block[..8].copy_from_slice(&sector.to_le_bytes());
        self.essiv
            .encrypt_block(GenericArray::from_mut_slice(&mut block));
        block
    }

    /// Encrypt `buf` in place. Length must be a multiple of 16.
    pub fn encrypt_sector(&self, sector: u64, buf: &mut [u8]) {
        debug_assert_eq!(buf.len() % AES_BLOCK, 0);
        let mut prev = self.iv_for(sector);
        for chunk in buf.chunks_exact_mut(AES_BLOCK) {
            for (b, p) in chunk.iter_mut().zip(prev.iter()) {
                *b ^= p;
            }
            let block: &mut [u8; AES_BLOCK] = chunk.try_into().unwrap();
            self.data.encrypt_block(block);
            prev = *block;
        }
    }

    /// Decrypt `buf` in place. Length must be a multiple of 16.
    pub fn decrypt_sector(&self, sector: u64, buf: &mut [u8]) {
        debug_assert_eq!(buf.len() % AES_BLOCK, 0);
        let mut prev = self.iv_for(sector);
        for chunk in buf.chunks_exact_mut(AES_BLOCK) {
            let saved: [u8; AES_BLOCK] = chunk.try_into().unwrap();
            let block: &mut [u8; AES_BLOCK] = chunk.try_into().unwrap();
            self.data.decrypt_block(block);
            for (b, p) in chunk.iter_mut().zip(prev.iter()) {
                *b ^= p;
            }
            prev = saved;
        }
    }
}

/// Encrypted view of a physical volume with the master key held in memory.
///
/// Debug output never includes key material.
pub struct EncryptedDevice {
    vol: PhysicalVolume,
    cipher: SectorCipher,
    master_key: Vec<u8>,
    kdf_salt: [u8; 16],
    kdf_iterations: u32,
}

impl std::fmt::Debug for EncryptedDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncryptedDevice")
            .field("vol", &self.vol)
            .field("kdf_iterations", &self.kdf_iterations)
            .finish_non_exhaustive()
    }
}

impl EncryptedDevice {
    /// Initialize FDE on a freshly created volume.
    ///
    /// Generates a random master key, wraps it under the password-derived
    /// key, and writes the crypto footer. Fails if a footer is already
    /// present.
    pub fn init(vol: PhysicalVolume, password: &[u8], params: FdeParams) -> Result<Self> {
        if password.is_empty() {
            return Err(Error::EmptyPassword);
        }
        let mut footer = [0u8; FOOTER_SIZE as usize];
        vol.read_footer_region(&mut footer)?;
        if footer[0..8] == *FOOTER_MAGIC {
            return Err(Error::FooterAlreadyPresent);
        }

        let mut rng = rand::thread_rng();
        let mut master_key = vec![0u8; params.key_size.byte_len()];
        rng.fill_bytes(&mut master_key);
        let mut kdf_salt = [0u8; 16];
        rng.fill_bytes(&mut kdf_salt);

        let kek = derive_kek(password, &kdf_salt, params.kdf_iterations, master_key.len());
        let wrapped = wrap_key(&kek, &master_key);

        let cipher = SectorCipher::new(&master_key);
        let check_value = compute_check_value(&cipher);

        footer = [0u8; FOOTER_SIZE as usize];
        footer[0..8].copy_from_slice(FOOTER_MAGIC);
        footer[8..12].copy_from_slice(&FOOTER_VERSION.to_le_bytes());
        footer[12..16].copy_from_slice(&params.kdf_iterations.to_le_bytes());
        footer[16..32].copy_from_slice(&kdf_salt);
        footer[32..36].copy_from_slice(&(master_key.len() as u32).to_le_bytes());
        footer[36..36 + wrapped.len()].copy_from_slice(&wrapped);
        footer[68..68 + SECTOR_SIZE].copy_from_slice(&check_value);
        vol.write_footer_region(&footer)?;
        vol.sync()?;

        Ok(Self {
            vol,
            cipher,
            master_key,
            kdf_salt,
            kdf_iterations: params.kdf_iterations,
        })
    }

    /// Open an FDE volume: unwrap the master key and verify it against the
    /// footer check value.
    pub fn open(vol: PhysicalVolume, password: &[u8]) -> Result<Self> {
        let mut footer = [0u8; FOOTER_SIZE as usize];
        vol.read_footer_region(&mut footer)?;
        if footer[0..8] != *FOOTER_MAGIC {
            return Err(Error::CorruptFooter);
        }
        let version = u32::from_le_bytes(footer[8..12].try_into().unwrap());
        if version != FOOTER_VERSION {
            return Err(Error::CorruptFooter);
        }
        let kdf_iterations = u32::from_le_bytes(footer[12..16].try_into().unwrap());
        let kdf_salt: [u8; 16] = footer[16..32].try_into().unwrap();
        let key_len = u32::from_le_bytes(footer[32..36].try_into().unwrap()) as usize;
        if kdf_iterations == 0 || (key_len != 16 && key_len != 32) {
            return Err(Error::CorruptFooter);
        }
        let wrapped = &footer[36..36 + key_len];
        let stored_check = &footer[68..68 + SECTOR_SIZE];

        let kek = derive_kek(password, &kdf_salt, kdf_iterations, key_len);
        let master_key = unwrap_key(&kek, wrapped);
        let cipher = SectorCipher::new(&master_key);
        if compute_check_value(&cipher)[..] != *stored_check {
            return Err(Error::BadPassword);
        }

        Ok(Self {
            vol,
            cipher,
            master_key,
            kdf_salt,
            kdf_iterations,
        })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.vol.capacity_bytes()
    }

    pub fn sector_count(&self) -> u64 {
        self.vol.sector_count()
    }

    /// KDF salt from the crypto footer. Also used as the salt for hidden
    /// volume name derivation, so no second salt store exists.
    pub fn kdf_salt(&self) -> [u8; 16] {
        self.kdf_salt
    }

    pub fn kdf_iterations(&self) -> u32 {
        self.kdf_iterations
    }

    /// SHA-256 of the master key, for identity checks without exposing it.
    pub fn key_fingerprint(&self) -> [u8; 32] {
        Sha256::digest(&self.master_key).into()
    }

    /// Read and decrypt one sector.
    pub fn read_sector(&self, sector: u64, buf: &mut SectorBuf) -> Result<()> {
        self.vol.read_sector(sector, buf)?;
        self.cipher.decrypt_sector(sector, buf);
        Ok(())
    }

    /// Encrypt and write one sector.
    pub fn write_sector(&self, sector: u64, buf: &SectorBuf) -> Result<()> {
        let mut ct = *buf;
        self.cipher.encrypt_sector(sector, &mut ct);
        self.vol.write_sector(sector, &ct)
    }

    /// Read and decrypt a contiguous sector run with a single backing IO.
    pub fn read_sectors(&self, first: u64, buf: &mut [u8]) -> Result<()> {
        self.vol.read_sectors(first, buf)?;
        for (i, chunk) in buf.chunks_exact_mut(SECTOR_SIZE).enumerate() {
            self.cipher.decrypt_sector(first + i as u64, chunk);
        }
        Ok(())
    }

    /// Encrypt and write a contiguous sector run with a single backing IO.
    pub fn write_sectors(&self, first: u64, data: &[u8]) -> Result<()> {
        let mut ct = data.to_vec();
        for (i, chunk) in ct.chunks_exact_mut(SECTOR_SIZE).enumerate() {
            self.cipher.encrypt_sector(first + i as u64, chunk);
        }
        self.vol.write_sectors(first, &ct)
    }

    pub fn sync(&self) -> Result<()> {
        self.vol.sync()
    }

    /// The underlying raw volume (forensic scans, capacity queries).
    pub fn raw(&self) -> &PhysicalVolume {
        &self.vol
    }
}

fn derive_kek(password: &[u8], salt: &[u8; 16], iterations: u32, key_len: usize) -> Vec<u8> {
    let mut kek = vec![0u8; key_len];
    pbkdf2::pbkdf2_hmac::<Sha256>(password, salt, iterations, &mut kek);
    kek
}

/// Wrap the master key: AES-CBC under the KEK with a zero IV. The KEK is
/// unique per (password, salt), so the deterministic IV discloses nothing.
fn wrap_key(kek: &[u8], master_key: &[u8]) -> Vec<u8> {
    let cipher = BlockCipher::new(kek);
    let mut out = master_key.to_vec();
    let mut prev = [0u8; AES_BLOCK];
    for chunk in out.chunks_exact_mut(AES_BLOCK) {
        for (b, p) in chunk.iter_mut().zip(prev.iter()) {
            *b ^= p;
        }
        let block: &mut [u8; AES_BLOCK] = chunk.try_into().unwrap();
        cipher.encrypt_block(block);
        prev = *block;
    }
    out
}

fn unwrap_key(kek: &[u8], wrapped: &[u8]) -> Vec<u8> {
    let cipher = BlockCipher::new(kek);
    let mut out = wrapped.to_vec();
    let mut prev = [0u8; AES_BLOCK];
    for chunk in out.chunks_exact_mut(AES_BLOCK) {
        let saved: [u8; AES_BLOCK] = (&*chunk).try_into().unwrap();
        let block: &mut [u8; AES_BLOCK] = chunk.try_into().unwrap();
        cipher.decrypt_block(block);
        for (b, p) in chunk.iter_mut().zip(prev.iter()) {
            *b ^= p;
        }
        prev = saved;
    }
    out
}

/// Check value: the fixed check plaintext encrypted at the reserved check
/// sector. Verifies iff the unwrapped master key is correct.
fn compute_check_value(cipher: &SectorCipher) -> [u8; SECTOR_SIZE] {
    let mut buf = [0u8; SECTOR_SIZE];
    for chunk in buf.chunks_exact_mut(CHECK_PLAINTEXT_UNIT.len()) {
        chunk.copy_from_slice(CHECK_PLAINTEXT_UNIT);
    }
    cipher.encrypt_sector(CHECK_SECTOR, &mut buf);
    buf
}
