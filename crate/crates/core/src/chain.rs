//! Multi-chain authentication.
//!
//! A payload is cut into `n` chunks; chunk `i` is sealed under its own nonce
//! with the single byte `[i]` as AAD, giving `n` short GHASH chains that can
//! be checked independently. The serial binding is what turns a reordering
//! of records into a verification failure.

use std::num::NonZeroUsize;

use thiserror::Error;

use crate::gcm::{Aes256Gcm, Key256, Nonce96, Tag128, BLOCK};

/// Chunk `i` of a message uses the base nonce with `i` added to the top
/// byte of the 8-byte counter; message counters must stay below this.
pub const CHUNK_COUNTER_SHIFT: u32 = 56;
pub const MAX_MESSAGE_COUNTER: u64 = (1 << CHUNK_COUNTER_SHIFT) - 1;
pub const TAG_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("chain count must be between 1 and 255, got {0}")]
    OutOfRange(usize),
    #[error("baseline byte count must be positive")]
    ZeroBaseline,
}

/// How many chains a payload is split into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ChainPolicy {
    n_chains: u8,
}

impl ChainPolicy {
    pub fn new(n_chains: usize) -> Result<Self, PolicyError> {
        match u8::try_from(n_chains) {
            Ok(n) if n >= 1 => Ok(Self { n_chains: n }),
            _ => Err(PolicyError::OutOfRange(n_chains)),
        }
    }

    pub fn single() -> Self {
        Self { n_chains: 1 }
    }

    pub fn n_chains(&self) -> usize {
        usize::from(self.n_chains)
    }
}

impl Default for ChainPolicy {
    fn default() -> Self {
        Self { n_chains: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainRecord {
    pub serial: u8,
    pub ct: Vec<u8>,
    pub tag: Tag128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainedEnvelope {
    pub base_nonce: Nonce96,
    pub records: Vec<ChainRecord>,
    pub total_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("chain {serial} failed authentication")]
    ChainAuthFailure { serial: u8 },
    #[error("record at position {expected} carries serial {got}")]
    ReorderDetected { expected: u8, got: u8 },
    #[error("envelope has {got} records, expected {expected}")]
    CountMismatch { expected: usize, got: usize },
    #[error("base counter {counter} leaves no room for chunk serials")]
    CounterOutOfRange { counter: u64 },
    #[error("records hold {got} bytes but the envelope declares {declared}")]
    LengthMismatch { declared: u64, got: u64 },
}

/// Ceil-sized chunks; the last may be short and trailing ones may be empty.
/// Always returns exactly `n_chains` slices.
pub fn split_chunks(pt: &[u8], policy: ChainPolicy) -> Vec<&[u8]> {
    let n = policy.n_chains();
    let size = pt.len().div_ceil(n);
    (0..n)
        .map(|i| {
            let start = (i * size).min(pt.len());
            let end = ((i + 1) * size).min(pt.len());
            &pt[start..end]
        })
        .collect()
}

pub fn chunk_nonce(base: Nonce96, serial: u8) -> Nonce96 {
    debug_assert!(base.counter <= MAX_MESSAGE_COUNTER);
    Nonce96::new(base.direction_id, base.counter + (u64::from(serial) << CHUNK_COUNTER_SHIFT))
}

/// Execution lanes for sealing and verification. Lanes are spread over OS
/// threads up to the host's parallelism; lanes sharing a thread advance
/// their GHASH chains in lockstep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lanes(NonZeroUsize);

impl Lanes {
    pub fn new(n: usize) -> Self {
        Self(NonZeroUsize::new(n.max(1)).expect("nonzero"))
    }

    pub fn get(self) -> usize {
        self.0.get()
    }

    fn plan(self, items: usize) -> (usize, usize) {
        let host = std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1);
        let threads = self.get().min(host).min(items.max(1));
        let width = self.get().div_ceil(threads);
        (threads, width)
    }
}

impl Default for Lanes {
    fn default() -> Self {
        Self::new(1)
    }
}

/// Runs `work` over contiguous groups of `items` on up to `threads` scoped
/// threads and concatenates results in input order.
fn fan_out<T: Sync, R: Send>(items: &[T], threads: usize, work: impl Fn(&[T]) -> Vec<R> + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return work(items);
    }
    let per = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|g| s.spawn(|| work(g))).collect();
        handles.into_iter().flat_map(|h| h.join().expect("lane panicked")).collect()
    })
}

fn tags_in_lockstep(cipher: &Aes256Gcm, items: &[(Nonce96, [u8; 1], &[u8])], width: usize) -> Vec<Tag128> {
    items
        .chunks(width.max(1))
        .flat_map(|g| {
            let view: Vec<(Nonce96, &[u8], &[u8])> = g.iter().map(|(n, a, c)| (*n, &a[..], *c)).collect();
            cipher.compute_tags_lockstep(&view)
        })
        .collect()
}

/// Seals and opens envelopes for one key.
#[derive(Debug, Clone)]
pub struct ChainCodec {
    cipher: Aes256Gcm,
    policy: ChainPolicy,
    lanes: Lanes,
}

impl ChainCodec {
    pub fn new(cipher: Aes256Gcm, policy: ChainPolicy, lanes: Lanes) -> Self {
        Self { cipher, policy, lanes }
    }

    pub fn policy(&self) -> ChainPolicy {
        self.policy
    }

    pub fn cipher(&self) -> &Aes256Gcm {
        &self.cipher
    }

    pub fn seal(&self, base_nonce: Nonce96, pt: &[u8]) -> ChainedEnvelope {
        assert!(base_nonce.counter <= MAX_MESSAGE_COUNTER, "message counter exhausted");
        let chunks = split_chunks(pt, self.policy);
        let cts: Vec<Vec<u8>> = {
            let jobs: Vec<(u8, &[u8])> = chunks.iter().enumerate().map(|(i, c)| (i as u8, *c)).collect();
            let (threads, _) = self.lanes.plan(jobs.len());
            fan_out(&jobs, threads, |group| {
                group
                    .iter()
                    .map(|(i, c)| {
                        let ks = self.cipher.keystream(chunk_nonce(base_nonce, *i), c.len().div_ceil(BLOCK));
                        crate::gcm::xor_finalize(&ks, c).expect("keystream sized to chunk")
                    })
                    .collect()
            })
        };
        let tags = self.tags(base_nonce, cts.iter().map(Vec::as_slice));
        let records = cts
            .into_iter()
            .zip(tags)
            .enumerate()
            .map(|(i, (ct, tag))| ChainRecord { serial: i as u8, ct, tag })
            .collect();
        ChainedEnvelope { base_nonce, records, total_len: pt.len() as u64 }
    }

    // Tags for records at positions 0.., each bound to its position.
    fn tags<'a>(&self, base: Nonce96, cts: impl Iterator<Item = &'a [u8]>) -> Vec<Tag128> {
        let items: Vec<(Nonce96, [u8; 1], &[u8])> =
            cts.enumerate().map(|(i, ct)| (chunk_nonce(base, i as u8), [i as u8], ct)).collect();
        let (threads, width) = self.lanes.plan(items.len());
        fan_out(&items, threads, |group| tags_in_lockstep(&self.cipher, group, width))
    }

    fn check_shape(&self, env: &ChainedEnvelope) -> Result<(), ChainError> {
        if env.base_nonce.counter > MAX_MESSAGE_COUNTER {
            return Err(ChainError::CounterOutOfRange { counter: env.base_nonce.counter });
        }
        let n = self.policy.n_chains();
        if env.records.len() != n {
            return Err(ChainError::CountMismatch { expected: n, got: env.records.len() });
        }
        let got: u64 = env.records.iter().map(|r| r.ct.len() as u64).sum();
        if got != env.total_len {
            return Err(ChainError::LengthMismatch { declared: env.total_len, got });
        }
        let Some(pos) = env.records.iter().enumerate().position(|(pos, r)| usize::from(r.serial) != pos) else {
            return Ok(());
        };
        // Serials that are a permutation of the positions mean whole records
        // were moved. Anything else (a duplicated or out-of-range serial) is a
        // corrupted AAD byte, which can never authenticate at this position.
        let mut seen = vec![false; n];
        let permutation = env.records.iter().all(|r| {
            let s = usize::from(r.serial);
            s < n && !std::mem::replace(&mut seen[s], true)
        });
        if permutation {
            Err(ChainError::ReorderDetected { expected: pos as u8, got: env.records[pos].serial })
        } else {
            Err(ChainError::ChainAuthFailure { serial: pos as u8 })
        }
    }

    /// Tag checks only. Reports the lowest failing position.
    pub fn verify(&self, env: &ChainedEnvelope) -> Result<(), ChainError> {
        self.check_shape(env)?;
        let expect = self.tags(env.base_nonce, env.records.iter().map(|r| r.ct.as_slice()));
        // Fold over every record so timing does not depend on which fails.
        let first_bad = env.records.iter().zip(&expect).fold(None, |bad, (r, t)| {
            if bad.is_none() && !t.verify(&r.tag) {
                Some(r.serial)
            } else {
                bad
            }
        });
        match first_bad {
            Some(serial) => Err(ChainError::ChainAuthFailure { serial }),
            None => Ok(()),
        }
    }

    /// Verifies every chain, then decrypts. Nothing is released on failure.
    pub fn open(&self, env: &ChainedEnvelope) -> Result<Vec<u8>, ChainError> {
        self.verify(env)?;
        Ok(self.apply_keystreams(env))
    }

    /// Decryption without tag checks, for callers that overlap it with
    /// [`ChainCodec::verify`]. The output must be discarded unless `verify`
    /// accepts the same envelope.
    pub fn decrypt_unverified(&self, env: &ChainedEnvelope) -> Result<Vec<u8>, ChainError> {
        self.check_shape(env)?;
        Ok(self.apply_keystreams(env))
    }

    fn apply_keystreams(&self, env: &ChainedEnvelope) -> Vec<u8> {
        // Each chain decrypts straight into its slice of the output.
        let mut out = vec![0u8; env.records.iter().map(|r| r.ct.len()).sum()];
        let mut jobs: Vec<(&ChainRecord, &mut [u8])> = Vec::with_capacity(env.records.len());
        let mut rest = out.as_mut_slice();
        for r in &env.records {
            let (dst, tail) = rest.split_at_mut(r.ct.len());
            jobs.push((r, dst));
            rest = tail;
        }
        let decrypt = |group: &mut [(&ChainRecord, &mut [u8])]| {
            for (r, dst) in group.iter_mut() {
                self.cipher.ctr_into(chunk_nonce(env.base_nonce, r.serial), &r.ct, dst);
            }
        };
        let (threads, _) = self.lanes.plan(jobs.len());
        if threads <= 1 || jobs.len() <= 1 {
            decrypt(&mut jobs);
        } else {
            let per = jobs.len().div_ceil(threads);
            std::thread::scope(|s| {
                for group in jobs.chunks_mut(per) {
                    s.spawn(|| decrypt(group));
                }
            });
        }
        out
    }
}

pub fn seal_multichain(key: &Key256, base_nonce: Nonce96, pt: &[u8], policy: ChainPolicy) -> ChainedEnvelope {
    ChainCodec::new(Aes256Gcm::new(key), policy, Lanes::default()).seal(base_nonce, pt)
}

/// Opens `env`, which must have been sealed with `policy`'s chain count.
pub fn open_multichain(key: &Key256, env: &ChainedEnvelope, policy: ChainPolicy) -> Result<Vec<u8>, ChainError> {
    ChainCodec::new(Aes256Gcm::new(key), policy, Lanes::default()).open(env)
}

/// Wire cost of n-chain authentication relative to one chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OverheadAccount {
    pub extra_tag_bytes: u64,
    pub extra_aad_bytes: u64,
    pub baseline_bytes: u64,
    pub fraction: f64,
}

impl OverheadAccount {
    pub fn extra_bytes(&self) -> u64 {
        self.extra_tag_bytes + self.extra_aad_bytes
    }
}

pub fn overhead(policy: ChainPolicy, baseline_bytes: u64) -> Result<OverheadAccount, PolicyError> {
    if baseline_bytes == 0 {
        return Err(PolicyError::ZeroBaseline);
    }
    let n = policy.n_chains() as u64;
    let extra_tag_bytes = TAG_BYTES as u64 * (n - 1);
    let extra_aad_bytes = n;
    Ok(OverheadAccount {
        extra_tag_bytes,
        extra_aad_bytes,
        baseline_bytes,
        fraction: (extra_tag_bytes + extra_aad_bytes) as f64 / baseline_bytes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> Key256 {
        Key256::from_bytes([0x11; 32])
    }

    fn nonce() -> Nonce96 {
        Nonce96::new(*b"mchn", 3)
    }

    #[test]
    fn forged_out_of_range_counter_is_rejected() {
        let mut env = seal_multichain(&key(), nonce(), b"payload", policy(4));
        env.base_nonce.counter |= 1 << 63;
        let counter = env.base_nonce.counter;
        assert_eq!(open_multichain(&key(), &env, policy(4)), Err(ChainError::CounterOutOfRange { counter }));
    }

    fn policy(n: usize) -> ChainPolicy {
        ChainPolicy::new(n).unwrap()
    }

    #[test]
    fn split_examples() {
        let pt = [0u8; 48];
        assert_eq!(split_chunks(&pt, policy(3)).iter().map(|c| c.len()).collect::<Vec<_>>(), [16, 16, 16]);
        let pt: Vec<u8> = (0..50).collect();
        let parts = split_chunks(&pt, policy(3));
        assert_eq!(parts.iter().map(|c| c.len()).collect::<Vec<_>>(), [17, 17, 16]);
        assert_eq!(parts.concat(), pt);
        assert_eq!(split_chunks(&pt, policy(1)), vec![&pt[..]]);
        let tiny = [1u8, 2];
        assert_eq!(split_chunks(&tiny, policy(4)).iter().map(|c| c.len()).collect::<Vec<_>>(), [1, 1, 0, 0]);
    }

    #[test]
    fn policy_bounds() {
        assert!(ChainPolicy::new(0).is_err());
        assert!(ChainPolicy::new(256).is_err());
        assert_eq!(ChainPolicy::new(255).unwrap().n_chains(), 255);
    }

    #[test]
    fn single_chain_matches_plain_seal() {
        let env = seal_multichain(&key(), nonce(), b"payload bytes", policy(1));
        let (ct, tag) = crate::gcm::seal(&key(), nonce(), &[0], b"payload bytes");
        assert_eq!(env.records.len(), 1);
        assert_eq!(env.records[0].ct, ct);
        assert_eq!(env.records[0].tag, tag);
    }

    #[test]
    fn sixteen_tags_per_item() {
        let item = vec![0xabu8; 4096];
        let env = seal_multichain(&key(), nonce(), &item, ChainPolicy::default());
        assert_eq!(env.records.len(), 16);
        let tags: std::collections::HashSet<_> = env.records.iter().map(|r| r.tag).collect();
        assert_eq!(tags.len(), 16);
        assert_eq!(open_multichain(&key(), &env, ChainPolicy::default()).unwrap(), item);
    }

    #[test]
    fn swap_is_reported_at_first_position() {
        let pt = vec![7u8; 1600];
        let mut env = seal_multichain(&key(), nonce(), &pt, policy(16));
        env.records.swap(4, 7);
        assert_eq!(open_multichain(&key(), &env, policy(16)), Err(ChainError::ReorderDetected { expected: 4, got: 7 }));
        // Rewriting the serials to hide the swap breaks the tags instead.
        env.records[4].serial = 4;
        env.records[7].serial = 7;
        assert_eq!(open_multichain(&key(), &env, policy(16)), Err(ChainError::ChainAuthFailure { serial: 4 }));
    }

    #[test]
    fn corrupted_serial_is_an_auth_failure() {
        let mut env = seal_multichain(&key(), nonce(), &[3u8; 300], policy(8));
        env.records[5].serial ^= 0x02;
        assert_eq!(open_multichain(&key(), &env, policy(8)), Err(ChainError::ChainAuthFailure { serial: 5 }));
        let mut one = seal_multichain(&key(), nonce(), b"x", policy(1));
        one.records[0].serial = 0x80;
        assert_eq!(open_multichain(&key(), &one, policy(1)), Err(ChainError::ChainAuthFailure { serial: 0 }));
    }

    #[test]
    fn flipped_bit_names_its_chain() {
        let mut env = seal_multichain(&key(), nonce(), &[3u8; 300], policy(8));
        env.records[2].ct[5] ^= 0x10;
        assert_eq!(open_multichain(&key(), &env, policy(8)), Err(ChainError::ChainAuthFailure { serial: 2 }));
    }

    #[test]
    fn dropped_record_or_bad_length_is_rejected() {
        let env = seal_multichain(&key(), nonce(), &[1u8; 48], policy(3));
        let mut short = env.clone();
        short.records.pop();
        short.total_len = 32;
        assert_eq!(open_multichain(&key(), &short, policy(3)), Err(ChainError::CountMismatch { expected: 3, got: 2 }));
        let mut bad = env.clone();
        bad.total_len = 47;
        assert!(matches!(open_multichain(&key(), &bad, policy(3)), Err(ChainError::LengthMismatch { .. })));
    }

    #[test]
    fn lanes_do_not_change_results() {
        let pt: Vec<u8> = (0..5000u32).map(|i| i as u8).collect();
        let c = Aes256Gcm::new(&key());
        let one = ChainCodec::new(c.clone(), policy(16), Lanes::new(1)).seal(nonce(), &pt);
        let many = ChainCodec::new(c.clone(), policy(16), Lanes::new(8)).seal(nonce(), &pt);
        assert_eq!(one, many);
        assert_eq!(ChainCodec::new(c, policy(16), Lanes::new(5)).open(&one).unwrap(), pt);
    }

    #[test]
    fn overhead_arithmetic() {
        let o = overhead(policy(16), 112 * 1024).unwrap();
        assert_eq!(o.extra_bytes(), 256);
        assert!(o.fraction < 0.005);
        assert!((o.fraction - 256.0 / 114688.0).abs() < 1e-15);
        let one = overhead(policy(1), 1000).unwrap();
        assert_eq!((one.extra_tag_bytes, one.extra_aad_bytes), (0, 1));
        assert_eq!(overhead(policy(2), 0), Err(PolicyError::ZeroBaseline));
        for n in 1..=255 {
            assert_eq!(overhead(policy(n), 1).unwrap().extra_bytes(), 16 * (n as u64 - 1) + n as u64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_and_agreement_across_n(pt in proptest::collection::vec(any::<u8>(), 0..700)) {
            for n in [1usize, 2, 3, 8, 16, 255] {
                let env = seal_multichain(&key(), nonce(), &pt, policy(n));
                prop_assert_eq!(env.records.len(), n);
                prop_assert_eq!(open_multichain(&key(), &env, policy(n)).unwrap(), pt.clone());
            }
        }
    }
}
