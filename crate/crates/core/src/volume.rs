//! LUKS-style encrypted block device.
//!
//! A volume holds a header with eight keyslots and a data area of
//! per-sector authenticated ciphertexts. The master key is generated at
//! format time and only ever leaves volatile memory wrapped inside a keyslot.
//! Erasing the keyslots leaves live [`UnlockedVolume`] handles working while
//! making the data area unreachable from anything persisted.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

pub const SECTOR_BYTES: usize = 512;
pub const MASTER_KEY_BYTES: usize = 64;
pub const KEYFILE_BYTES: usize = 512;
pub const KEYSLOT_COUNT: usize = 8;
pub const SALT_BYTES: usize = 32;
pub const DEFAULT_KDF_ITERATIONS: u32 = 10_000;

const NONCE_BYTES: usize = 12;
const TAG_BYTES: usize = 16;
const WRAPPED_KEY_BYTES: usize = NONCE_BYTES + MASTER_KEY_BYTES + TAG_BYTES;
/// Stored size of one sector: nonce, ciphertext, tag.
pub const SECTOR_RECORD_BYTES: usize = NONCE_BYTES + SECTOR_BYTES + TAG_BYTES;
const CONTAINER_MAGIC: &[u8] = b"TSVOL1\n";
const CIPHER_NAME: &str = "chacha20-poly1305-sector";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VolumeError {
    #[error("invalid cipher spec: {0}")]
    InvalidSpec(String),
    #[error("volume must have at least one sector")]
    NoSectors,
    #[error("no active keyslot opens with the supplied keyfile")]
    NoMatchingSlot,
    #[error("all keyslots are empty")]
    KeyslotsEmpty,
    #[error("volume handle is no longer valid (volatile memory cleared)")]
    StaleHandle,
    #[error("sector {0} failed authentication under the current key")]
    AuthFailure(u64),
    #[error("sector {index} out of range (volume has {count} sectors)")]
    OutOfRange { index: u64, count: u64 },
    #[error("header geometry ({header} sectors) does not match volume ({volume} sectors)")]
    GeometryMismatch { header: u64, volume: u64 },
    #[error("handle belongs to a different volume")]
    ForeignHandle,
    #[error("malformed volume container: {0}")]
    Malformed(String),
    #[error("malformed keyslot record: {0}")]
    MalformedSlot(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Cipher parameters recorded in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherSpec {
    pub master_key_bits: u32,
    pub sector_bytes: u32,
    pub kdf_iterations: u32,
}

impl Default for CipherSpec {
    fn default() -> Self {
        CipherSpec {
            master_key_bits: (MASTER_KEY_BYTES * 8) as u32,
            sector_bytes: SECTOR_BYTES as u32,
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
        }
    }
}

impl CipherSpec {
    pub fn with_iterations(kdf_iterations: u32) -> Self {
        CipherSpec { kdf_iterations, ..CipherSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.master_key_bits as usize != MASTER_KEY_BYTES * 8 {
            return Err(VolumeError::InvalidSpec(format!(
                "master key must be {} bits, got {}",
                MASTER_KEY_BYTES * 8,
                self.master_key_bits
            )));
        }
        if self.sector_bytes as usize != SECTOR_BYTES {
            return Err(VolumeError::InvalidSpec(format!(
                "sector size must be {} bytes, got {}",
                SECTOR_BYTES, self.sector_bytes
            )));
        }
        if self.kdf_iterations == 0 {
            return Err(VolumeError::InvalidSpec("kdf iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Passphrase material read from the unencrypted boot partition.
#[derive(Clone, PartialEq, Eq)]
pub struct Keyfile(Box<[u8; KEYFILE_BYTES]>);

impl Keyfile {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = Box::new([0u8; KEYFILE_BYTES]);
        rng.fill_bytes(&mut bytes[..]);
        Keyfile(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEYFILE_BYTES] = bytes
            .try_into()
            .map_err(|_| VolumeError::InvalidSpec(format!("keyfile must be {KEYFILE_BYTES} bytes")))?;
        Ok(Keyfile(Box::new(arr)))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0[..]
    }
}

impl fmt::Debug for Keyfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Keyfile(..)")
    }
}

impl Drop for Keyfile {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

/// The volume master key. Lives in memory only.
#[derive(Clone)]
pub struct MasterKey(Zeroizing<[u8; MASTER_KEY_BYTES]>);

impl MasterKey {
    fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = Zeroizing::new([0u8; MASTER_KEY_BYTES]);
        rng.fill_bytes(&mut bytes[..]);
        MasterKey(bytes)
    }

    /// Raw key bytes. Callers must not persist these.
    pub fn expose(&self) -> &[u8] {
        &self.0[..]
    }

    fn sector_cipher(&self) -> ChaCha20Poly1305 {
        let mut h = Sha256::new();
        h.update(b"tsvol sector key v1");
        h.update(&self.0[..]);
        let mut key: [u8; 32] = h.finalize().into();
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
        key.zeroize();
        cipher
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

/// Salted, iterated SHA-256.
fn kdf(secret: &[u8], salt: &[u8], iterations: u32) -> Zeroizing<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(secret);
    let mut acc: [u8; 32] = h.finalize().into();
    for _ in 1..iterations {
        let mut h = Sha256::new();
        h.update(acc);
        h.update(salt);
        acc = h.finalize().into();
    }
    Zeroizing::new(acc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[derive(Default)]
pub enum KeySlot {
    #[default]
    Empty,
    Active(ActiveSlot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSlot {
    pub salt: [u8; SALT_BYTES],
    pub kdf_iterations: u32,
    /// nonce || AEAD(master key)
    pub wrapped_key: Vec<u8>,
}

impl KeySlot {
    pub fn is_active(&self) -> bool {
        matches!(self, KeySlot::Active(_))
    }

    fn wrap<R: RngCore + CryptoRng>(
        key: &MasterKey,
        keyfile: &Keyfile,
        iterations: u32,
        rng: &mut R,
    ) -> KeySlot {
        let mut salt = [0u8; SALT_BYTES];
        rng.fill_bytes(&mut salt);
        let kek = kdf(keyfile.as_bytes(), &salt, iterations);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&kek[..]));
        let mut nonce = [0u8; NONCE_BYTES];
        rng.fill_bytes(&mut nonce);
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: key.expose(), aad: &salt })
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let mut wrapped_key = nonce.to_vec();
        wrapped_key.extend_from_slice(&ct);
        KeySlot::Active(ActiveSlot { salt, kdf_iterations: iterations, wrapped_key })
    }

    fn unwrap_key(&self, keyfile: &Keyfile) -> Option<MasterKey> {
        let KeySlot::Active(slot) = self else { return None };
        if slot.wrapped_key.len() != WRAPPED_KEY_BYTES {
            return None;
        }
        let kek = kdf(keyfile.as_bytes(), &slot.salt, slot.kdf_iterations);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&kek[..]));
        let (nonce, ct) = slot.wrapped_key.split_at(NONCE_BYTES);
        let pt = Zeroizing::new(
            cipher
                .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: &slot.salt })
                .ok()?,
        );
        let mut bytes = Zeroizing::new([0u8; MASTER_KEY_BYTES]);
        bytes.copy_from_slice(&pt);
        Some(MasterKey(bytes))
    }

    /// Serialized keyslot record; what gets escrowed.
    pub fn to_record(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            KeySlot::Empty => out.push(0),
            KeySlot::Active(s) => {
                out.push(1);
                out.extend_from_slice(&s.salt);
                out.extend_from_slice(&s.kdf_iterations.to_le_bytes());
                put_bytes(&mut out, &s.wrapped_key);
            }
        }
        out
    }

    pub fn from_record(bytes: &[u8]) -> Result<KeySlot> {
        let mut r = Reader::new(bytes);
        let slot = read_slot(&mut r).map_err(|e| VolumeError::MalformedSlot(e.to_string()))?;
        if !r.is_empty() {
            return Err(VolumeError::MalformedSlot("trailing bytes".into()));
        }
        Ok(slot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeHeader {
    pub uuid: [u8; 16],
    pub spec: CipherSpec,
    pub sector_count: u64,
    pub slots: [KeySlot; KEYSLOT_COUNT],
    pub mk_digest_salt: [u8; SALT_BYTES],
    pub mk_digest: [u8; 32],
}

impl VolumeHeader {
    fn digest_matches(&self, key: &MasterKey) -> bool {
        let d = kdf(key.expose(), &self.mk_digest_salt, self.spec.kdf_iterations);
        d[..] == self.mk_digest
    }

    pub fn uuid_string(&self) -> String {
        let h = hex::encode(self.uuid);
        format!("{}-{}-{}-{}-{}", &h[0..8], &h[8..12], &h[12..16], &h[16..20], &h[20..32])
    }

    pub fn active_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_active()).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.uuid);
        out.extend_from_slice(&self.spec.master_key_bits.to_le_bytes());
        out.extend_from_slice(&self.spec.sector_bytes.to_le_bytes());
        out.extend_from_slice(&self.spec.kdf_iterations.to_le_bytes());
        out.extend_from_slice(&self.sector_count.to_le_bytes());
        out.extend_from_slice(&self.mk_digest_salt);
        out.extend_from_slice(&self.mk_digest);
        for slot in &self.slots {
            out.extend_from_slice(&slot.to_record());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = read_header(&mut r).map_err(|e| VolumeError::Malformed(e.to_string()))?;
        if !r.is_empty() {
            return Err(VolumeError::Malformed("trailing bytes after header".into()));
        }
        Ok(header)
    }
}

/// Text rendering of a header, in the spirit of `cryptsetup luksDump`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderDump {
    pub uuid: String,
    pub spec: CipherSpec,
    pub sector_count: u64,
    pub mk_digest: String,
    pub slots: [bool; KEYSLOT_COUNT],
}

impl HeaderDump {
    pub fn all_empty(&self) -> bool {
        self.slots.iter().all(|active| !active)
    }
}

impl fmt::Display for HeaderDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "LUKS header information")?;
        writeln!(f, "Version:       \t1")?;
        writeln!(f, "Cipher:        \t{CIPHER_NAME}")?;
        writeln!(f, "MK bits:       \t{}", self.spec.master_key_bits)?;
        writeln!(f, "Sector size:   \t{}", self.spec.sector_bytes)?;
        writeln!(f, "Sectors:       \t{}", self.sector_count)?;
        writeln!(f, "MK digest:     \t{}", self.mk_digest)?;
        writeln!(f, "MK iterations: \t{}", self.spec.kdf_iterations)?;
        writeln!(f, "UUID:          \t{}", self.uuid)?;
        for (i, active) in self.slots.iter().enumerate() {
            writeln!(f, "Key Slot {i}: {}", if *active { "ACTIVE" } else { "EMPTY" })?;
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq)]
struct SectorRecord(Box<[u8; SECTOR_RECORD_BYTES]>);

impl fmt::Debug for SectorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SectorRecord({}..)", hex::encode(&self.0[..4]))
    }
}

/// An encrypted disk: header plus data area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedVolume {
    header: VolumeHeader,
    sectors: Vec<SectorRecord>,
}

fn seal_sector<R: RngCore + CryptoRng>(
    cipher: &ChaCha20Poly1305,
    index: u64,
    plaintext: &[u8; SECTOR_BYTES],
    rng: &mut R,
) -> SectorRecord {
    let mut nonce = [0u8; NONCE_BYTES];
    rng.fill_bytes(&mut nonce);
    let aad = index.to_le_bytes();
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: &aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut rec = Box::new([0u8; SECTOR_RECORD_BYTES]);
    rec[..NONCE_BYTES].copy_from_slice(&nonce);
    rec[NONCE_BYTES..].copy_from_slice(&ct);
    SectorRecord(rec)
}

fn open_sector(
    cipher: &ChaCha20Poly1305,
    index: u64,
    rec: &SectorRecord,
) -> Result<Zeroizing<[u8; SECTOR_BYTES]>> {
    let (nonce, ct) = rec.0.split_at(NONCE_BYTES);
    let aad = index.to_le_bytes();
    let pt = Zeroizing::new(
        cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: &aad })
            .map_err(|_| VolumeError::AuthFailure(index))?,
    );
    let mut out = Zeroizing::new([0u8; SECTOR_BYTES]);
    out.copy_from_slice(&pt);
    Ok(out)
}

fn mk_digest_for<R: RngCore + CryptoRng>(
    key: &MasterKey,
    iterations: u32,
    rng: &mut R,
) -> ([u8; SALT_BYTES], [u8; 32]) {
    let mut salt = [0u8; SALT_BYTES];
    rng.fill_bytes(&mut salt);
    let d = kdf(key.expose(), &salt, iterations);
    (salt, *d)
}

impl EncryptedVolume {
    /// Writes a fresh header with slot 0 bound to `keyfile` and fills the
    /// data area with encrypted zero sectors.
    pub fn format<R: RngCore + CryptoRng>(
        sector_count: u64,
        keyfile: &Keyfile,
        spec: CipherSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if sector_count == 0 {
            return Err(VolumeError::NoSectors);
        }
        let key = MasterKey::generate(rng);
        let mut uuid = [0u8; 16];
        rng.fill_bytes(&mut uuid);
        let (mk_digest_salt, mk_digest) = mk_digest_for(&key, spec.kdf_iterations, rng);
        let mut slots: [KeySlot; KEYSLOT_COUNT] = Default::default();
        slots[0] = KeySlot::wrap(&key, keyfile, spec.kdf_iterations, rng);
        let cipher = key.sector_cipher();
        let zero = [0u8; SECTOR_BYTES];
        let sectors = (0..sector_count).map(|i| seal_sector(&cipher, i, &zero, rng)).collect();
        Ok(EncryptedVolume {
            header: VolumeHeader { uuid, spec, sector_count, slots, mk_digest_salt, mk_digest },
            sectors,
        })
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn sector_count(&self) -> u64 {
        self.sectors.len() as u64
    }

    pub fn spec(&self) -> CipherSpec {
        self.header.spec
    }

    /// Tries every active slot; a candidate key is accepted only if it
    /// matches the header's master-key digest.
    pub fn unlock(&self, keyfile: &Keyfile) -> Result<UnlockedVolume> {
        let key = self.open_master_key(keyfile)?;
        Ok(UnlockedVolume::new(self.header.uuid, self.sector_count(), key))
    }

    fn open_master_key(&self, keyfile: &Keyfile) -> Result<MasterKey> {
        if self.header.active_slots() == 0 {
            return Err(VolumeError::KeyslotsEmpty);
        }
        self.header
            .slots
            .iter()
            .filter_map(|slot| slot.unwrap_key(keyfile))
            .find(|key| self.header.digest_matches(key))
            .ok_or(VolumeError::NoMatchingSlot)
    }

    /// Wipes all keyslots. Idempotent. The digest and cipher parameters stay.
    pub fn erase_keyslots(&mut self) {
        for slot in self.header.slots.iter_mut() {
            if let KeySlot::Active(active) = slot {
                active.salt.zeroize();
                active.wrapped_key.zeroize();
            }
            *slot = KeySlot::Empty;
        }
    }

    /// Re-keys the whole data area under a fresh master key, which is then
    /// wrapped in slot 0 under the same keyfile.
    pub fn reencrypt<R: RngCore + CryptoRng>(&mut self, keyfile: &Keyfile, rng: &mut R) -> Result<()> {
        let old_key = self.open_master_key(keyfile)?;
        let old_cipher = old_key.sector_cipher();
        let new_key = MasterKey::generate(rng);
        let new_cipher = new_key.sector_cipher();
        let mut fresh = Vec::with_capacity(self.sectors.len());
        for (i, rec) in self.sectors.iter().enumerate() {
            let pt = open_sector(&old_cipher, i as u64, rec)?;
            fresh.push(seal_sector(&new_cipher, i as u64, &pt, rng));
        }
        self.sectors = fresh;
        self.erase_keyslots();
        let iterations = self.header.spec.kdf_iterations;
        self.header.slots[0] = KeySlot::wrap(&new_key, keyfile, iterations, rng);
        let (salt, digest) = mk_digest_for(&new_key, iterations, rng);
        self.header.mk_digest_salt = salt;
        self.header.mk_digest = digest;
        Ok(())
    }

    pub fn header_backup(&self) -> VolumeHeader {
        self.header.clone()
    }

    pub fn restore_header(&mut self, header: VolumeHeader) -> Result<()> {
        if header.sector_count != self.sector_count() {
            return Err(VolumeError::GeometryMismatch {
                header: header.sector_count,
                volume: self.sector_count(),
            });
        }
        self.header = header;
        Ok(())
    }

    /// Puts an escrowed keyslot record back into `index`.
    pub fn install_slot(&mut self, index: usize, slot: KeySlot) -> Result<()> {
        if index >= KEYSLOT_COUNT {
            return Err(VolumeError::MalformedSlot(format!("slot index {index} out of range")));
        }
        self.header.slots[index] = slot;
        Ok(())
    }

    pub fn dump(&self) -> HeaderDump {
        let mut slots = [false; KEYSLOT_COUNT];
        for (i, s) in self.header.slots.iter().enumerate() {
            slots[i] = s.is_active();
        }
        HeaderDump {
            uuid: self.header.uuid_string(),
            spec: self.header.spec,
            sector_count: self.header.sector_count,
            mk_digest: hex::encode(self.header.mk_digest),
            slots,
        }
    }

    /// Raw stored bytes of one sector record.
    pub fn raw_sector(&self, index: u64) -> Option<&[u8]> {
        self.sectors.get(index as usize).map(|r| &r.0[..])
    }

    /// Serializes to the `TSVOL1` container layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.to_bytes();
        let mut out =
            Vec::with_capacity(CONTAINER_MAGIC.len() + 4 + header.len() + self.sectors.len() * SECTOR_RECORD_BYTES);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.sectors {
            out.extend_from_slice(&s.0[..]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| VolumeError::Malformed(m.to_string());
        let rest = bytes.strip_prefix(CONTAINER_MAGIC).ok_or_else(|| malformed("bad magic"))?;
        if rest.len() < 4 {
            return Err(malformed("truncated header length"));
        }
        let (len, rest) = rest.split_at(4);
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        if rest.len() < len {
            return Err(malformed("truncated header record"));
        }
        let (hdr, data) = rest.split_at(len);
        let header = VolumeHeader::from_bytes(hdr)?;
        if data.len() % SECTOR_RECORD_BYTES != 0 {
            return Err(malformed("data area is not a whole number of sectors"));
        }
        let sectors: Vec<SectorRecord> = data
            .chunks_exact(SECTOR_RECORD_BYTES)
            .map(|c| SectorRecord(Box::new(c.try_into().unwrap())))
            .collect();
        if sectors.len() as u64 != header.sector_count {
            return Err(VolumeError::GeometryMismatch { header: header.sector_count, volume: sectors.len() as u64 });
        }
        Ok(EncryptedVolume { header, sectors })
    }
}

/// Shared liveness flag for everything held in one machine's RAM.
#[derive(Debug, Clone)]
pub struct Liveness(Arc<AtomicBool>);

impl Liveness {
    pub fn new() -> Self {
        Liveness(Arc::new(AtomicBool::new(true)))
    }

    pub fn is_alive(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn clear(&self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl Default for Liveness {
    fn default() -> Self {
        Self::new()
    }
}

/// An opened volume: the master key held in volatile memory.
pub struct UnlockedVolume {
    uuid: [u8; 16],
    sector_count: u64,
    key: Option<MasterKey>,
    cipher: Option<ChaCha20Poly1305>,
    liveness: Liveness,
}

impl fmt::Debug for UnlockedVolume {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnlockedVolume")
            .field("uuid", &hex::encode(self.uuid))
            .field("sector_count", &self.sector_count)
            .field("valid", &self.is_valid())
            .finish()
    }
}

impl UnlockedVolume {
    fn new(uuid: [u8; 16], sector_count: u64, key: MasterKey) -> Self {
        let cipher = key.sector_cipher();
        UnlockedVolume { uuid, sector_count, key: Some(key), cipher: Some(cipher), liveness: Liveness::new() }
    }

    /// Ties this handle to a machine's RAM so power loss invalidates it.
    pub fn bind(mut self, liveness: &Liveness) -> Self {
        self.liveness = liveness.clone();
        self
    }

    pub fn is_valid(&self) -> bool {
        self.key.is_some() && self.liveness.is_alive()
    }

    /// Drops the key from memory.
    pub fn invalidate(&mut self) {
        self.key = None;
        self.cipher = None;
        self.liveness.clear();
    }

    /// Master key of a live handle. Volatile use only.
    pub fn master_key(&self) -> Result<&MasterKey> {
        if !self.liveness.is_alive() {
            return Err(VolumeError::StaleHandle);
        }
        self.key.as_ref().ok_or(VolumeError::StaleHandle)
    }

    fn check(&self, vol: &EncryptedVolume, index: u64) -> Result<&ChaCha20Poly1305> {
        let cipher = match (&self.cipher, self.liveness.is_alive()) {
            (Some(c), true) => c,
            _ => return Err(VolumeError::StaleHandle),
        };
        if vol.header.uuid != self.uuid || vol.sector_count() != self.sector_count {
            return Err(VolumeError::ForeignHandle);
        }
        if index >= self.sector_count {
            return Err(VolumeError::OutOfRange { index, count: self.sector_count });
        }
        Ok(cipher)
    }

    pub fn read_sector(&self, vol: &EncryptedVolume, index: u64) -> Result<Zeroizing<[u8; SECTOR_BYTES]>> {
        let cipher = self.check(vol, index)?;
        open_sector(cipher, index, &vol.sectors[index as usize])
    }

    pub fn write_sector<R: RngCore + CryptoRng>(
        &self,
        vol: &mut EncryptedVolume,
        index: u64,
        plaintext: &[u8; SECTOR_BYTES],
        rng: &mut R,
    ) -> Result<()> {
        let cipher = self.check(vol, index)?;
        vol.sectors[index as usize] = seal_sector(cipher, index, plaintext, rng);
        Ok(())
    }

    /// Decrypts the whole data area in sector order.
    pub fn read_all(&self, vol: &EncryptedVolume) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.sector_count as usize * SECTOR_BYTES);
        for i in 0..self.sector_count {
            out.extend_from_slice(&self.read_sector(vol, i)?[..]);
        }
        Ok(out)
    }
}

// Little binary reader shared by header, slot and container decoding.

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], &'static str> {
        if self.buf.len() < n {
            return Err("unexpected end of record");
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], &'static str> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> std::result::Result<u32, &'static str> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, &'static str> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> std::result::Result<&'a [u8], &'static str> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn read_slot(r: &mut Reader<'_>) -> std::result::Result<KeySlot, &'static str> {
    match r.take(1)?[0] {
        0 => Ok(KeySlot::Empty),
        1 => {
            let salt = r.array()?;
            let kdf_iterations = r.u32()?;
            let wrapped_key = r.bytes()?.to_vec();
            Ok(KeySlot::Active(ActiveSlot { salt, kdf_iterations, wrapped_key }))
        }
        _ => Err("unknown keyslot state"),
    }
}

fn read_header(r: &mut Reader<'_>) -> std::result::Result<VolumeHeader, &'static str> {
    let uuid = r.array()?;
    let spec = CipherSpec { master_key_bits: r.u32()?, sector_bytes: r.u32()?, kdf_iterations: r.u32()? };
    spec.validate().map_err(|_| "invalid cipher spec")?;
    let sector_count = r.u64()?;
    let mk_digest_salt = r.array()?;
    let mk_digest = r.array()?;
    let mut slots: [KeySlot; KEYSLOT_COUNT] = Default::default();
    for slot in slots.iter_mut() {
        *slot = read_slot(r)?;
    }
    Ok(VolumeHeader { uuid, spec, sector_count, slots, mk_digest_salt, mk_digest })
}
