//! AES-256 forward cipher.
//!
//! The portable path is bitsliced: up to four blocks are spread over eight
//! 64-bit bit-planes (plane `k` holds bit `k` of every state byte) and the
//! S-box is evaluated as GF(2^8) inversion plus the affine map, so there are
//! no secret-indexed table lookups. An AES-NI path is available on x86_64.

use super::Backend;

pub const BLOCK: usize = 16;
pub type Block = [u8; BLOCK];

/// Expanded AES-256 key: 15 round keys.
#[derive(Clone, PartialEq, Eq)]
pub struct RoundKeys {
    expanded: [Block; 15],
    // Bitsliced copies of each round key, replicated across the four slots.
    sliced: [Planes; 15],
}

impl std::fmt::Debug for RoundKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("RoundKeys(..)")
    }
}

impl RoundKeys {
    pub fn round_key(&self, round: usize) -> &Block {
        &self.expanded[round]
    }

    pub fn as_blocks(&self) -> &[Block; 15] {
        &self.expanded
    }
}

type Planes = [u64; 8];

/// FIPS-197 key expansion for a 256-bit key.
pub fn expand_key(key: &[u8; 32]) -> RoundKeys {
    let mut w = [[0u8; 4]; 60];
    for (i, word) in w.iter_mut().take(8).enumerate() {
        word.copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    let mut rcon = 1u8;
    for i in 8..60 {
        let mut t = w[i - 1];
        if i % 8 == 0 {
            t.rotate_left(1);
            t = sub_word(t);
            t[0] ^= rcon;
            rcon = xtime(rcon);
        } else if i % 8 == 4 {
            t = sub_word(t);
        }
        for j in 0..4 {
            w[i][j] = w[i - 8][j] ^ t[j];
        }
    }
    let mut expanded = [[0u8; 16]; 15];
    for (r, rk) in expanded.iter_mut().enumerate() {
        for c in 0..4 {
            rk[4 * c..4 * c + 4].copy_from_slice(&w[4 * r + c]);
        }
    }
    let mut sliced = [[0u64; 8]; 15];
    for (r, rk) in expanded.iter().enumerate() {
        sliced[r] = pack(&[*rk, *rk, *rk, *rk]);
    }
    RoundKeys { expanded, sliced }
}

fn xtime(a: u8) -> u8 {
    (a << 1) ^ (0x1b & (a >> 7).wrapping_neg())
}

fn sub_word(word: [u8; 4]) -> [u8; 4] {
    let mut b = [0u8; 16];
    b[..4].copy_from_slice(&word);
    let mut p = pack(&[b]);
    sub_bytes(&mut p);
    let out = unpack(&p, 1)[0];
    [out[0], out[1], out[2], out[3]]
}

/// Encrypts one block with the portable path.
pub fn encrypt_block(rk: &RoundKeys, block: &Block) -> Block {
    encrypt_block_with(rk, block, Backend::Portable)
}

pub(crate) fn encrypt_block_with(rk: &RoundKeys, block: &Block, backend: Backend) -> Block {
    let mut one = [*block];
    encrypt_blocks(rk, &mut one, backend);
    one[0]
}

/// Encrypts every block in place.
pub(crate) fn encrypt_blocks(rk: &RoundKeys, blocks: &mut [Block], backend: Backend) {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Hardware && ni::available() {
        // SAFETY: feature presence checked by `ni::available`.
        unsafe { ni::encrypt_blocks(rk.as_blocks(), blocks) };
        return;
    }
    let _ = backend;
    for chunk in blocks.chunks_mut(4) {
        let mut p = pack(chunk);
        encrypt_planes(rk, &mut p);
        let out = unpack(&p, chunk.len());
        chunk.copy_from_slice(&out[..chunk.len()]);
    }
}

fn encrypt_planes(rk: &RoundKeys, p: &mut Planes) {
    add_round_key(p, &rk.sliced[0]);
    for round in 1..14 {
        sub_bytes(p);
        shift_rows(p);
        mix_columns(p);
        add_round_key(p, &rk.sliced[round]);
    }
    sub_bytes(p);
    shift_rows(p);
    add_round_key(p, &rk.sliced[14]);
}

// Bit position of byte `i` of slot `s` is 16*s + i; byte i sits at row i%4,
// column i/4, so inside a 16-bit group a position is 4*col + row.
fn pack(blocks: &[Block]) -> Planes {
    let mut p = [0u64; 8];
    for (s, block) in blocks.iter().enumerate() {
        for (i, &byte) in block.iter().enumerate() {
            let pos = 16 * s + i;
            for (k, plane) in p.iter_mut().enumerate() {
                *plane |= u64::from((byte >> k) & 1) << pos;
            }
        }
    }
    p
}

fn unpack(p: &Planes, n: usize) -> [Block; 4] {
    let mut out = [[0u8; 16]; 4];
    for (s, block) in out.iter_mut().enumerate().take(n) {
        for (i, byte) in block.iter_mut().enumerate() {
            let pos = 16 * s + i;
            let mut b = 0u8;
            for (k, plane) in p.iter().enumerate() {
                b |= (((plane >> pos) & 1) as u8) << k;
            }
            *byte = b;
        }
    }
    out
}

fn add_round_key(p: &mut Planes, k: &Planes) {
    for (a, b) in p.iter_mut().zip(k) {
        *a ^= b;
    }
}

// GF(2^8) multiply on bit-planes, modulus x^8 + x^4 + x^3 + x + 1.
fn gf_mul(a: &Planes, b: &Planes) -> Planes {
    let mut c = [0u64; 15];
    for i in 0..8 {
        for j in 0..8 {
            c[i + j] ^= a[i] & b[j];
        }
    }
    reduce(c)
}

fn gf_square(a: &Planes) -> Planes {
    let mut c = [0u64; 15];
    for i in 0..8 {
        c[2 * i] = a[i];
    }
    reduce(c)
}

fn reduce(mut c: [u64; 15]) -> Planes {
    for t in (8..15).rev() {
        let v = c[t];
        c[t - 4] ^= v;
        c[t - 5] ^= v;
        c[t - 7] ^= v;
        c[t - 8] ^= v;
    }
    let mut out = [0u64; 8];
    out.copy_from_slice(&c[..8]);
    out
}

fn gf_square_n(a: &Planes, n: usize) -> Planes {
    let mut r = *a;
    for _ in 0..n {
        r = gf_square(&r);
    }
    r
}

fn sub_bytes(p: &mut Planes) {
    // x^254 = x^-1 (and 0 -> 0).
    let x = *p;
    let x2 = gf_square(&x);
    let x3 = gf_mul(&x2, &x);
    let x12 = gf_square_n(&x3, 2);
    let x15 = gf_mul(&x12, &x3);
    let x240 = gf_square_n(&x15, 4);
    let x252 = gf_mul(&x240, &x12);
    let inv = gf_mul(&x252, &x2);
    for i in 0..8 {
        p[i] = inv[i] ^ inv[(i + 4) % 8] ^ inv[(i + 5) % 8] ^ inv[(i + 6) % 8] ^ inv[(i + 7) % 8];
    }
    // affine constant 0x63
    p[0] = !p[0];
    p[1] = !p[1];
    p[5] = !p[5];
    p[6] = !p[6];
}

const fn rep(g: u64) -> u64 {
    g | (g << 16) | (g << 32) | (g << 48)
}

fn shift_rows(p: &mut Planes) {
    const ROW: [u64; 4] = [rep(0x1111), rep(0x2222), rep(0x4444), rep(0x8888)];
    for plane in p.iter_mut() {
        let x = *plane;
        let mut out = x & ROW[0];
        for (r, mask) in ROW.iter().enumerate().skip(1) {
            let s = 4 * r as u32;
            let row = x & mask;
            let low = rep(0xffff >> s);
            let high = rep((0xffff << (16 - s)) & 0xffff);
            out |= ((row >> s) & low) | ((row << (16 - s)) & high);
        }
        *plane = out;
    }
}

// Row rotation inside each column: position r receives row (r + k) % 4.
fn rot1(x: u64) -> u64 {
    ((x >> 1) & rep(0x7777)) | ((x << 3) & rep(0x8888))
}
fn rot2(x: u64) -> u64 {
    ((x >> 2) & rep(0x3333)) | ((x << 2) & rep(0xcccc))
}
fn rot3(x: u64) -> u64 {
    ((x >> 3) & rep(0x1111)) | ((x << 1) & rep(0xeeee))
}

fn mix_columns(p: &mut Planes) {
    let mut r1 = [0u64; 8];
    let mut t = [0u64; 8];
    let mut rest = [0u64; 8];
    for k in 0..8 {
        r1[k] = rot1(p[k]);
        t[k] = p[k] ^ r1[k];
        rest[k] = r1[k] ^ rot2(p[k]) ^ rot3(p[k]);
    }
    // xtime on planes
    let x2 = [t[7], t[0] ^ t[7], t[1], t[2] ^ t[7], t[3] ^ t[7], t[4], t[5], t[6]];
    for k in 0..8 {
        p[k] = x2[k] ^ rest[k];
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod ni {
    use super::Block;
    use core::arch::x86_64::*;

    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("aes") && std::arch::is_x86_feature_detected!("sse2")
    }

    #[target_feature(enable = "aes,sse2")]
    pub unsafe fn encrypt_blocks(rk: &[Block; 15], blocks: &mut [Block]) {
        let mut keys = [_mm_setzero_si128(); 15];
        for (k, r) in keys.iter_mut().zip(rk) {
            *k = _mm_loadu_si128(r.as_ptr() as *const __m128i);
        }
        let mut chunks = blocks.chunks_exact_mut(8);
        for chunk in &mut chunks {
            let mut s = [_mm_setzero_si128(); 8];
            for (x, b) in s.iter_mut().zip(chunk.iter()) {
                *x = _mm_xor_si128(_mm_loadu_si128(b.as_ptr() as *const __m128i), keys[0]);
            }
            for key in &keys[1..14] {
                for x in s.iter_mut() {
                    *x = _mm_aesenc_si128(*x, *key);
                }
            }
            for (x, b) in s.iter().zip(chunk.iter_mut()) {
                let y = _mm_aesenclast_si128(*x, keys[14]);
                _mm_storeu_si128(b.as_mut_ptr() as *mut __m128i, y);
            }
        }
        for b in chunks.into_remainder() {
            let mut x = _mm_xor_si128(_mm_loadu_si128(b.as_ptr() as *const __m128i), keys[0]);
            for key in &keys[1..14] {
                x = _mm_aesenc_si128(x, *key);
            }
            x = _mm_aesenclast_si128(x, keys[14]);
            _mm_storeu_si128(b.as_mut_ptr() as *mut __m128i, x);
        }
    }
}
