//! AES-256-GCM: block cipher, CTR keystream (whole and split-phase), GHASH
//! and the seal/open contract the rest of the crate builds on.
//!
//! Counter convention follows GCM: J0 = nonce || 1 masks the tag, payload
//! blocks use counters 2, 3, ... The keystream is a pure function of the key,
//! nonce and block count, so it can be produced before any ciphertext exists
//! and applied later with [`xor_finalize`].

mod aes;
mod ghash;

use std::sync::OnceLock;

use thiserror::Error;

pub use aes::{encrypt_block, expand_key, Block, RoundKeys, BLOCK};
pub use ghash::{ghash, GhashKey};

pub(crate) use ghash::ghash_lockstep;

/// Which implementation runs the cipher and the field multiply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Bitsliced AES and shift-and-add GHASH; constant time, no tables.
    Portable,
    /// AES-NI and PCLMULQDQ when the CPU has them, portable otherwise.
    Hardware,
}

impl Backend {
    /// Process-wide default: `FTRK_BACKEND=hardware` opts into the
    /// accelerated path, anything else keeps the portable one.
    pub fn configured() -> Backend {
        static CONFIGURED: OnceLock<Backend> = OnceLock::new();
        *CONFIGURED.get_or_init(|| match std::env::var("FTRK_BACKEND").as_deref() {
            Ok("hardware") | Ok("hw") => Backend::Hardware,
            _ => Backend::Portable,
        })
    }

    /// True when `Hardware` actually reaches the accelerated instructions.
    pub fn hardware_available() -> bool {
        #[cfg(target_arch = "x86_64")]
        {
            aes::ni::available() && ghash::clmul::available()
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::Portable => "portable",
            Backend::Hardware => "hardware",
        }
    }
}

/// 256-bit AES key. Debug output never shows the bytes.
#[derive(Clone)]
pub struct Key256([u8; 32]);

impl Key256 {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }
}

impl PartialEq for Key256 {
    fn eq(&self, other: &Self) -> bool {
        ct_eq(&self.0, &other.0)
    }
}
impl Eq for Key256 {}

impl std::fmt::Debug for Key256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Key256(..)")
    }
}

/// 96-bit GCM nonce: a 4-byte channel direction tag and an 8-byte big-endian
/// per-message counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Nonce96 {
    pub direction_id: [u8; 4],
    pub counter: u64,
}

impl Nonce96 {
    pub fn new(direction_id: [u8; 4], counter: u64) -> Self {
        Self { direction_id, counter }
    }

    pub fn from_bytes(b: [u8; 12]) -> Self {
        let mut d = [0u8; 4];
        d.copy_from_slice(&b[..4]);
        let mut c = [0u8; 8];
        c.copy_from_slice(&b[4..]);
        Self { direction_id: d, counter: u64::from_be_bytes(c) }
    }

    pub fn to_bytes(self) -> [u8; 12] {
        let mut b = [0u8; 12];
        b[..4].copy_from_slice(&self.direction_id);
        b[4..].copy_from_slice(&self.counter.to_be_bytes());
        b
    }

    fn counter_block(self, ctr: u32) -> Block {
        let mut b = [0u8; 16];
        b[..12].copy_from_slice(&self.to_bytes());
        b[12..].copy_from_slice(&ctr.to_be_bytes());
        b
    }
}

/// 128-bit authentication tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag128(pub [u8; 16]);

impl Tag128 {
    /// Constant-time comparison.
    pub fn verify(&self, other: &Tag128) -> bool {
        ct_eq(&self.0, &other.0)
    }
}

impl std::fmt::Debug for Tag128 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tag128({})", hex::encode(self.0))
    }
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let diff = a.iter().zip(b).fold(0u8, |d, (x, y)| d | (x ^ y));
    std::hint::black_box(diff) == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("authentication tag mismatch")]
pub struct AuthFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("ciphertext of {needed} bytes exceeds keystream coverage of {available} bytes")]
pub struct KeystreamTooShort {
    pub needed: usize,
    pub available: usize,
}

/// Precomputed CTR pad for one pending message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keystream {
    pub blocks: Vec<Block>,
    pub first_counter: u32,
    pub nonce: Nonce96,
}

impl Keystream {
    pub fn byte_len(&self) -> usize {
        self.blocks.len() * BLOCK
    }
}

/// An expanded key ready for sealing and opening.
#[derive(Clone, Debug)]
pub struct Aes256Gcm {
    rk: RoundKeys,
    h: GhashKey,
    backend: Backend,
}

impl Aes256Gcm {
    pub fn new(key: &Key256) -> Self {
        Self::with_backend(key, Backend::configured())
    }

    pub fn with_backend(key: &Key256, backend: Backend) -> Self {
        let rk = expand_key(key.expose());
        let h = GhashKey::from_bytes(aes::encrypt_block_with(&rk, &[0u8; 16], backend));
        Self { rk, h, backend }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn round_keys(&self) -> &RoundKeys {
        &self.rk
    }

    pub fn ghash_key(&self) -> &GhashKey {
        &self.h
    }

    pub fn keystream(&self, nonce: Nonce96, m: usize) -> Keystream {
        keystream_with(&self.rk, nonce, m, self.backend)
    }

    fn tag_mask(&self, nonce: Nonce96) -> u128 {
        u128::from_be_bytes(aes::encrypt_block_with(&self.rk, &nonce.counter_block(1), self.backend))
    }

    /// Tag over (aad, ct) under `nonce`.
    pub fn compute_tag(&self, nonce: Nonce96, aad: &[u8], ct: &[u8]) -> Tag128 {
        let s = u128::from_be_bytes(ghash::ghash_with(&self.h, aad, ct, self.backend));
        Tag128((s ^ self.tag_mask(nonce)).to_be_bytes())
    }

    /// Tags for many (nonce, aad, ct) triples; GHASH chains run in lockstep.
    pub(crate) fn compute_tags_lockstep(&self, items: &[(Nonce96, &[u8], &[u8])]) -> Vec<Tag128> {
        let inputs: Vec<(&[u8], &[u8])> = items.iter().map(|(_, a, c)| (*a, *c)).collect();
        let digests = ghash_lockstep(&self.h, &inputs, self.backend);
        let mut masks: Vec<Block> = items.iter().map(|(n, _, _)| n.counter_block(1)).collect();
        aes::encrypt_blocks(&self.rk, &mut masks, self.backend);
        digests.iter().zip(masks).map(|(d, m)| Tag128((d ^ u128::from_be_bytes(m)).to_be_bytes())).collect()
    }

    /// `out = data ^ CTR(nonce)`, generating the pad a tile at a time so no
    /// message-sized keystream is ever materialized.
    pub(crate) fn ctr_into(&self, nonce: Nonce96, data: &[u8], out: &mut [u8]) {
        const TILE: usize = 64;
        assert_eq!(data.len(), out.len());
        let mut pad = [[0u8; BLOCK]; TILE];
        let mut counter = FIRST_PAYLOAD_COUNTER;
        for (src, dst) in data.chunks(TILE * BLOCK).zip(out.chunks_mut(TILE * BLOCK)) {
            let pad = &mut pad[..src.len().div_ceil(BLOCK)];
            for p in pad.iter_mut() {
                *p = nonce.counter_block(counter);
                counter = counter.wrapping_add(1);
            }
            aes::encrypt_blocks(&self.rk, pad, self.backend);
            xor_blocks(pad, src, dst);
        }
    }

    pub fn seal(&self, nonce: Nonce96, aad: &[u8], pt: &[u8]) -> (Vec<u8>, Tag128) {
        let mut ct = vec![0u8; pt.len()];
        self.ctr_into(nonce, pt, &mut ct);
        let tag = self.compute_tag(nonce, aad, &ct);
        (ct, tag)
    }

    /// Tag check only; no keystream work.
    pub fn verify(&self, nonce: Nonce96, aad: &[u8], ct: &[u8], tag: &Tag128) -> Result<(), AuthFailure> {
        if self.compute_tag(nonce, aad, ct).verify(tag) {
            Ok(())
        } else {
            Err(AuthFailure)
        }
    }

    pub fn open(&self, nonce: Nonce96, aad: &[u8], ct: &[u8], tag: &Tag128) -> Result<Vec<u8>, AuthFailure> {
        self.verify(nonce, aad, ct, tag)?;
        let mut pt = vec![0u8; ct.len()];
        self.ctr_into(nonce, ct, &mut pt);
        Ok(pt)
    }
}

/// J0 uses counter 1 for the tag mask; payload blocks start at 2.
const FIRST_PAYLOAD_COUNTER: u32 = 2;

fn keystream_with(rk: &RoundKeys, nonce: Nonce96, m: usize, backend: Backend) -> Keystream {
    let first_counter = FIRST_PAYLOAD_COUNTER;
    let mut blocks: Vec<Block> = (0..m).map(|i| nonce.counter_block(first_counter.wrapping_add(i as u32))).collect();
    aes::encrypt_blocks(rk, &mut blocks, backend);
    Keystream { blocks, first_counter, nonce }
}

fn apply(ks: &Keystream, data: &[u8]) -> Vec<u8> {
    assert!(data.len() <= ks.byte_len());
    let mut out = vec![0u8; data.len()];
    xor_blocks(&ks.blocks, data, &mut out);
    out
}

/// `out = data ^ pad` over the first `data.len()` bytes. The pad must cover
/// `data` and `out` must be exactly as long as `data`.
fn xor_blocks(pad: &[Block], data: &[u8], out: &mut [u8]) {
    assert_eq!(data.len(), out.len());
    out.copy_from_slice(data);
    for (chunk, k) in out.chunks_mut(BLOCK).zip(pad) {
        if let Ok(full) = <&mut [u8; BLOCK]>::try_from(&mut *chunk) {
            *full = (u128::from_ne_bytes(*full) ^ u128::from_ne_bytes(*k)).to_ne_bytes();
        } else {
            chunk.iter_mut().zip(k).for_each(|(d, k)| *d ^= k);
        }
    }
}

/// CTR pad of `m` blocks for `nonce`, counters starting at 2.
pub fn keystream(rk: &RoundKeys, nonce: Nonce96, m: usize) -> Keystream {
    keystream_with(rk, nonce, m, Backend::configured())
}

/// XOR `ct` against the keystream prefix.
pub fn xor_finalize(ks: &Keystream, ct: &[u8]) -> Result<Vec<u8>, KeystreamTooShort> {
    if ct.len() > ks.byte_len() {
        return Err(KeystreamTooShort { needed: ct.len(), available: ks.byte_len() });
    }
    Ok(apply(ks, ct))
}

pub fn seal(key: &Key256, nonce: Nonce96, aad: &[u8], pt: &[u8]) -> (Vec<u8>, Tag128) {
    Aes256Gcm::new(key).seal(nonce, aad, pt)
}

pub fn open(key: &Key256, nonce: Nonce96, aad: &[u8], ct: &[u8], tag: &Tag128) -> Result<Vec<u8>, AuthFailure> {
    Aes256Gcm::new(key).open(nonce, aad, ct, tag)
}
