//! GHASH over GF(2^128) with the GCM (bit-reflected) convention.
//!
//! Field elements are held as `u128` read big-endian from the 16-byte block,
//! so the coefficient of x^0 is the most significant bit.

use super::Backend;

// x^128 = x^7 + x^2 + x + 1, reflected.
const R: u128 = 0xe1 << 120;

/// Hash subkey H = AES(k, 0^128).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GhashKey {
    h: [u8; 16],
}

impl std::fmt::Debug for GhashKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("GhashKey(..)")
    }
}

impl GhashKey {
    pub fn from_bytes(h: [u8; 16]) -> Self {
        Self { h }
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.h
    }

    pub(crate) fn element(&self) -> u128 {
        u128::from_be_bytes(self.h)
    }
}

/// Constant-time shift-and-add multiply.
pub(crate) fn mul_portable(x: u128, y: u128) -> u128 {
    let mut z = 0u128;
    let mut v = y;
    for i in 0..128 {
        let bit = (x >> (127 - i)) & 1;
        z ^= v & bit.wrapping_neg();
        v = (v >> 1) ^ (R & (v & 1).wrapping_neg());
    }
    z
}

pub(crate) fn mul(x: u128, y: u128, backend: Backend) -> u128 {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Hardware && clmul::available() {
        // SAFETY: feature presence checked.
        return unsafe { clmul::mul(x, y) };
    }
    let _ = backend;
    mul_portable(x, y)
}

/// Running GHASH state for one chain.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ghash {
    h: u128,
    acc: u128,
    backend: Backend,
}

impl Ghash {
    pub fn new(key: &GhashKey, backend: Backend) -> Self {
        Self { h: key.element(), acc: 0, backend }
    }

    pub fn absorb_block(&mut self, block: u128) {
        self.acc = mul(self.acc ^ block, self.h, self.backend);
    }

    /// Absorbs `data` as zero-padded 16-byte blocks.
    pub fn absorb_padded(&mut self, data: &[u8]) {
        for chunk in data.chunks(16) {
            self.absorb_block(pad_block(chunk));
        }
    }

    pub fn finish(mut self, aad_len: usize, ct_len: usize) -> u128 {
        self.absorb_block(length_block(aad_len, ct_len));
        self.acc
    }
}

pub(crate) fn pad_block(chunk: &[u8]) -> u128 {
    let mut b = [0u8; 16];
    b[..chunk.len()].copy_from_slice(chunk);
    u128::from_be_bytes(b)
}

pub(crate) fn length_block(aad_len: usize, ct_len: usize) -> u128 {
    ((aad_len as u128 * 8) << 64) | (ct_len as u128 * 8)
}

/// GHASH_H(aad, ct) with the portable multiplier.
pub fn ghash(h: &GhashKey, aad: &[u8], ct: &[u8]) -> [u8; 16] {
    ghash_with(h, aad, ct, Backend::Portable)
}

pub(crate) fn ghash_with(h: &GhashKey, aad: &[u8], ct: &[u8], backend: Backend) -> [u8; 16] {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Hardware && clmul::available() {
        // SAFETY: feature presence checked.
        return unsafe { clmul::lockstep(h.element(), &[BlockSource::new(aad, ct)]) }[0].to_be_bytes();
    }
    let mut g = Ghash::new(h, backend);
    g.absorb_padded(aad);
    g.absorb_padded(ct);
    g.finish(aad.len(), ct.len()).to_be_bytes()
}

pub(crate) const MAX_LOCKSTEP: usize = 16;

/// GHASH of several (aad, ct) inputs under the same H, advanced in lockstep
/// so independent chains overlap in the multiplier. Returns one digest per
/// input, in order.
pub(crate) fn ghash_lockstep(h: &GhashKey, inputs: &[(&[u8], &[u8])], backend: Backend) -> Vec<u128> {
    let mut out = Vec::with_capacity(inputs.len());
    for group in inputs.chunks(MAX_LOCKSTEP) {
        out.extend(lockstep_group(h, group, backend));
    }
    out
}

// Blocks of one GHASH input: padded AAD, padded ciphertext, length block.
struct BlockSource<'a> {
    aad: &'a [u8],
    ct: &'a [u8],
    aad_blocks: usize,
    total: usize,
}

impl<'a> BlockSource<'a> {
    fn new(aad: &'a [u8], ct: &'a [u8]) -> Self {
        let aad_blocks = aad.len().div_ceil(16);
        Self { aad, ct, aad_blocks, total: aad_blocks + ct.len().div_ceil(16) + 1 }
    }

    #[inline]
    fn block(&self, i: usize) -> u128 {
        if i >= self.aad_blocks {
            let off = 16 * (i - self.aad_blocks);
            if let Some(b) = self.ct.get(off..off + 16) {
                return u128::from_be_bytes(b.try_into().expect("16 bytes"));
            }
            if off < self.ct.len() {
                return pad_block(&self.ct[off..]);
            }
            return length_block(self.aad.len(), self.ct.len());
        }
        pad_block(&self.aad[16 * i..(16 * i + 16).min(self.aad.len())])
    }
}

fn lockstep_group(h: &GhashKey, group: &[(&[u8], &[u8])], backend: Backend) -> Vec<u128> {
    let sources: Vec<BlockSource> = group.iter().map(|(a, c)| BlockSource::new(a, c)).collect();
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Hardware && clmul::available() {
        // SAFETY: feature presence checked.
        return unsafe { clmul::lockstep(h.element(), &sources) };
    }
    let _ = backend;
    lockstep_portable(h.element(), &sources)
}

fn lockstep_portable(hv: u128, sources: &[BlockSource]) -> Vec<u128> {
    let n = sources.len();
    if let [s] = sources {
        // A lone chain gains nothing from sharing and the scalar multiply
        // optimizes better than the per-lane loop.
        return vec![(0..s.total).fold(0, |acc, i| mul_portable(acc ^ s.block(i), hv))];
    }
    let common = sources.iter().map(|s| s.total).min().unwrap_or(0);
    let mut acc = [0u128; MAX_LOCKSTEP];
    for i in 0..common {
        for (a, s) in acc.iter_mut().zip(sources) {
            *a ^= s.block(i);
        }
        mul_many(&mut acc[..n], hv);
    }
    for (a, s) in acc.iter_mut().zip(sources) {
        for i in common..s.total {
            *a = mul_portable(*a ^ s.block(i), hv);
        }
    }
    acc[..n].to_vec()
}

/// xs[i] <- xs[i] * h for every lane, sharing the shift register for H.
/// Lanes are processed in fixed-width groups so each group's accumulators
/// stay in registers.
fn mul_many(xs: &mut [u128], h: u128) {
    let mut groups = xs.chunks_exact_mut(4);
    for g in &mut groups {
        mul_lanes::<4>(g.try_into().expect("group of 4"), h);
    }
    let rest = groups.into_remainder();
    let mut pairs = rest.chunks_exact_mut(2);
    for g in &mut pairs {
        mul_lanes::<2>(g.try_into().expect("group of 2"), h);
    }
    for x in pairs.into_remainder() {
        *x = mul_portable(*x, h);
    }
}

#[inline(always)]
fn mul_lanes<const N: usize>(xs: &mut [u128; N], h: u128) {
    let mut z = [0u128; N];
    let mut v = h;
    for i in 0..128 {
        for l in 0..N {
            z[l] ^= v & ((xs[l] >> (127 - i)) & 1).wrapping_neg();
        }
        v = (v >> 1) ^ (R & (v & 1).wrapping_neg());
    }
    *xs = z;
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod clmul {
    use core::arch::x86_64::*;

    pub fn available() -> bool {
        std::arch::is_x86_feature_detected!("pclmulqdq") && std::arch::is_x86_feature_detected!("ssse3")
    }

    #[inline]
    #[target_feature(enable = "sse2")]
    unsafe fn to_reg(x: u128) -> __m128i {
        _mm_set_epi64x((x >> 64) as i64, x as i64)
    }

    #[inline]
    #[target_feature(enable = "sse2")]
    unsafe fn from_reg(x: __m128i) -> u128 {
        core::mem::transmute::<__m128i, u128>(x)
    }

    /// Loads 16 bytes as the MSB-first field element.
    #[inline]
    #[target_feature(enable = "ssse3")]
    unsafe fn load_be(b: &[u8]) -> __m128i {
        debug_assert!(b.len() >= 16);
        let rev = _mm_set_epi8(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15);
        _mm_shuffle_epi8(_mm_loadu_si128(b.as_ptr() as *const __m128i), rev)
    }

    /// Multiplies `h` by x in the bit-reflected field so that products of
    /// MSB-first elements need no post-multiply shift.
    pub fn premul_x(h: u128) -> u128 {
        let carry = h >> 127;
        (h << 1) ^ (carry.wrapping_neg() & 0xC200_0000_0000_0000_0000_0000_0000_0001)
    }

    /// Field multiply on MSB-first elements held in SSE registers, with the
    /// second operand pre-multiplied by x: a 256-bit carry-less product
    /// followed by two folding steps against x^128 + x^127 + x^126 + x^121 + 1.
    #[inline]
    #[target_feature(enable = "pclmulqdq,sse2")]
    unsafe fn gfmul(a: __m128i, hx: __m128i) -> __m128i {
        let lo = _mm_clmulepi64_si128(a, hx, 0x00);
        let hi = _mm_clmulepi64_si128(a, hx, 0x11);
        let mid = _mm_xor_si128(_mm_clmulepi64_si128(a, hx, 0x01), _mm_clmulepi64_si128(a, hx, 0x10));
        let lo = _mm_xor_si128(lo, _mm_slli_si128(mid, 8));
        let hi = _mm_xor_si128(hi, _mm_srli_si128(mid, 8));
        let poly = _mm_set_epi64x(0, 0xC200_0000_0000_0000u64 as i64);
        let f = _mm_xor_si128(_mm_shuffle_epi32(lo, 0x4E), _mm_clmulepi64_si128(lo, poly, 0x00));
        let f = _mm_xor_si128(_mm_shuffle_epi32(f, 0x4E), _mm_clmulepi64_si128(f, poly, 0x00));
        _mm_xor_si128(hi, f)
    }

    #[target_feature(enable = "pclmulqdq,sse2")]
    pub unsafe fn mul(a: u128, b: u128) -> u128 {
        from_reg(gfmul(to_reg(a), to_reg(premul_x(b))))
    }

    #[target_feature(enable = "pclmulqdq,ssse3")]
    pub(super) unsafe fn lockstep(h: u128, sources: &[super::BlockSource]) -> Vec<u128> {
        let n = sources.len();
        let hr = to_reg(premul_x(h));
        let mut acc = [_mm_setzero_si128(); super::MAX_LOCKSTEP];
        // Full 16-byte ciphertext blocks shared by every lane go through the
        // fast path; the rest (AAD, ragged tails, length blocks) per lane.
        let pre = sources.iter().map(|s| s.aad_blocks).max().unwrap_or(0);
        for i in 0..pre {
            for (a, s) in acc[..n].iter_mut().zip(sources) {
                if i < s.total {
                    *a = gfmul(_mm_xor_si128(*a, to_reg(s.block(i))), hr);
                }
            }
        }
        let full = sources.iter().map(|s| if s.aad_blocks == pre { s.ct.len() / 16 } else { 0 }).min().unwrap_or(0);
        for j in 0..full {
            for (a, s) in acc[..n].iter_mut().zip(sources) {
                let b = load_be(s.ct.get_unchecked(16 * j..16 * j + 16));
                *a = gfmul(_mm_xor_si128(*a, b), hr);
            }
        }
        for (a, s) in acc[..n].iter_mut().zip(sources) {
            let start = if s.aad_blocks == pre { pre + full } else { pre.min(s.total) };
            for i in start..s.total {
                *a = gfmul(_mm_xor_si128(*a, to_reg(s.block(i))), hr);
            }
        }
        acc[..n].iter().map(|a| from_reg(*a)).collect()
    }
}
