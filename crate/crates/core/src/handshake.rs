//! Diffie-Hellman key agreement for the three session keys of the system:
//! user↔proxy, user↔accelerator and proxy↔accelerator.
//!
//! Each pair runs one ephemeral exchange. The initiator's HELLO and the
//! responder's REPLY carry fixed-width big-endian public elements and an
//! opaque attestation blob inside channel frames; in direct mode the
//! user↔accelerator messages are relayed by the proxy, which only ever sees
//! public elements. Keys come from HKDF-SHA256 keyed by the shared secret,
//! salted with a hash of the whole transcript and labelled per role pair.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use hkdf::Hkdf;
use num_bigint::{BigUint, RandBigInt};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{ChainRecord, MAX_MESSAGE_COUNTER};
use crate::channel::frame::{decode_frame, encode_frame, Frame, FrameLimits, MsgType};
use crate::gcm::{Key256, Nonce96, Tag128};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Proxy,
    Accelerator,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Proxy => "proxy",
            Role::Accelerator => "accel",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RolePair {
    UserProxy,
    UserAccel,
    ProxyAccel,
}

impl RolePair {
    pub const ALL: [RolePair; 3] = [RolePair::UserProxy, RolePair::UserAccel, RolePair::ProxyAccel];

    /// (initiator, responder); `Direction::Forward` runs from the first to the second.
    pub fn roles(self) -> (Role, Role) {
        match self {
            RolePair::UserProxy => (Role::User, Role::Proxy),
            RolePair::UserAccel => (Role::User, Role::Accelerator),
            RolePair::ProxyAccel => (Role::Proxy, Role::Accelerator),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RolePair::UserProxy => "user-proxy",
            RolePair::UserAccel => "user-accel",
            RolePair::ProxyAccel => "proxy-accel",
        }
    }

    fn code(self) -> u8 {
        match self {
            RolePair::UserProxy => 1,
            RolePair::UserAccel => 2,
            RolePair::ProxyAccel => 3,
        }
    }

    pub fn involves(self, role: Role) -> bool {
        let (a, b) = self.roles();
        a == role || b == role
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn from_sender(pair: RolePair, sender: Role) -> Option<Direction> {
        match pair.roles() {
            (a, _) if a == sender => Some(Direction::Forward),
            (_, b) if b == sender => Some(Direction::Reverse),
            _ => None,
        }
    }
}

/// Nonce direction tag for traffic on `pair` flowing in `dir`.
pub fn direction_id(pair: RolePair, dir: Direction) -> [u8; 4] {
    [b'F', b'T', pair.code(), if dir == Direction::Forward { 0 } else { 1 }]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandshakeError {
    #[error("scalar is degenerate for this group")]
    DegenerateScalar,
    #[error("public element is degenerate or outside the group")]
    InvalidElement,
    #[error("transcript does not contain this exchange's public elements")]
    TranscriptMismatch,
    #[error("{role} did not answer the handshake")]
    HandshakeTimeout { role: Role },
    #[error("participant given as {got} where {expected} was expected")]
    WrongRole { expected: Role, got: Role },
    #[error("malformed handshake message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NonceError {
    #[error("nonce counter {counter} was already used on this key")]
    Reused { counter: u64 },
    #[error("nonce counter space exhausted")]
    Exhausted,
}

/// A multiplicative group modulo a prime with a generator of known order.
pub struct DhGroup {
    name: &'static str,
    p: BigUint,
    g: BigUint,
    /// Order of `g`.
    q: BigUint,
    /// Checks peer elements for membership in the order-q subgroup.
    subgroup_check: bool,
    /// Scalars are drawn below 2^scalar_bits when set (short exponents),
    /// otherwise below q.
    scalar_bits: Option<u64>,
}

impl fmt::Debug for DhGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhGroup").field("name", &self.name).field("bits", &self.p.bits()).finish()
    }
}

const MODP_2048: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD\
EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
15728E5A8AACAA68FFFFFFFFFFFFFFFF";

impl DhGroup {
    /// The 2048-bit safe-prime group of RFC 3526 with generator 2, which
    /// generates the prime-order subgroup of quadratic residues.
    pub fn modp2048() -> &'static DhGroup {
        static G: OnceLock<DhGroup> = OnceLock::new();
        G.get_or_init(|| {
            let p = BigUint::parse_bytes(MODP_2048.as_bytes(), 16).expect("constant prime");
            let q = (&p - 1u32) >> 1;
            DhGroup { name: "modp2048", p, g: BigUint::from(2u32), q, subgroup_check: true, scalar_bits: Some(256) }
        })
    }

    /// Modulus 23 with generator 5 (order 22): small enough to check by hand.
    pub fn toy() -> &'static DhGroup {
        static G: OnceLock<DhGroup> = OnceLock::new();
        G.get_or_init(|| DhGroup {
            name: "toy23",
            p: BigUint::from(23u32),
            g: BigUint::from(5u32),
            q: BigUint::from(22u32),
            subgroup_check: false,
            scalar_bits: None,
        })
    }

    pub fn by_name(name: &str) -> Option<&'static DhGroup> {
        match name {
            "modp2048" => Some(Self::modp2048()),
            "toy23" | "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn element_bytes(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    pub fn pow(&self, base: &BigUint, e: &BigUint) -> BigUint {
        base.modpow(e, &self.p)
    }

    /// Rejects 0, 1, p−1 and anything outside [0, p); in subgroup-checked
    /// groups also anything whose order is not q.
    pub fn validate(&self, y: &BigUint) -> Result<(), HandshakeError> {
        let one = BigUint::from(1u32);
        if *y <= one || *y >= &self.p - 1u32 {
            return Err(HandshakeError::InvalidElement);
        }
        if self.subgroup_check && self.pow(y, &self.q) != one {
            return Err(HandshakeError::InvalidElement);
        }
        Ok(())
    }

    pub fn encode(&self, y: &BigUint) -> Vec<u8> {
        let raw = y.to_bytes_be();
        let mut out = vec![0u8; self.element_bytes().saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<BigUint, HandshakeError> {
        if bytes.len() != self.element_bytes() {
            return Err(HandshakeError::InvalidElement);
        }
        let y = BigUint::from_bytes_be(bytes);
        self.validate(&y)?;
        Ok(y)
    }
}

#[derive(Clone)]
pub struct KeyPair {
    group: &'static DhGroup,
    private_scalar: BigUint,
    public_element: BigUint,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("group", &self.group.name)
            .field("public_element", &self.public_element)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Builds a key pair from a chosen scalar; degenerate scalars (0, 1,
    /// multiples of the group order, or any scalar mapping to a degenerate
    /// element) are refused.
    pub fn from_scalar(group: &'static DhGroup, scalar: BigUint) -> Result<Self, HandshakeError> {
        let reduced = &scalar % &group.q;
        if reduced <= BigUint::from(1u32) {
            return Err(HandshakeError::DegenerateScalar);
        }
        let public_element = group.pow(&group.g, &scalar);
        group.validate(&public_element).map_err(|_| HandshakeError::DegenerateScalar)?;
        Ok(Self { group, private_scalar: scalar, public_element })
    }

    pub fn group(&self) -> &'static DhGroup {
        self.group
    }

    pub fn public_element(&self) -> &BigUint {
        &self.public_element
    }

    pub fn public_bytes(&self) -> Vec<u8> {
        self.group.encode(&self.public_element)
    }

    /// peer^scalar, after validating the peer element.
    pub fn shared_secret(&self, peer: &BigUint) -> Result<BigUint, HandshakeError> {
        self.group.validate(peer)?;
        Ok(self.group.pow(peer, &self.private_scalar))
    }
}

pub fn generate_keypair<R: RngCore + CryptoRng>(group: &'static DhGroup, rng: &mut R) -> KeyPair {
    loop {
        let scalar = match group.scalar_bits {
            Some(bits) => rng.gen_biguint(bits),
            None => rng.gen_biguint_below(&group.q),
        };
        if let Ok(kp) = KeyPair::from_scalar(group, scalar) {
            return kp;
        }
    }
}

/// Everything both ends of one exchange agree on; its hash salts the KDF.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeTranscript {
    pub group: String,
    pub role_pair: RolePair,
    pub role_a: Role,
    pub role_b: Role,
    /// Fresh per exchange, chosen by the initiator.
    pub session_id: u64,
    pub public_a: Vec<u8>,
    pub public_b: Vec<u8>,
    pub attestation_stub: Vec<u8>,
}

impl HandshakeTranscript {
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut field = |b: &[u8]| {
            h.update((b.len() as u64).to_be_bytes());
            h.update(b);
        };
        field(b"ftrk handshake v1");
        field(self.group.as_bytes());
        field(self.role_pair.label().as_bytes());
        field(self.role_a.name().as_bytes());
        field(self.role_b.name().as_bytes());
        field(&self.session_id.to_be_bytes());
        field(&self.public_a);
        field(&self.public_b);
        field(&self.attestation_stub);
        h.finalize().into()
    }
}

/// One directed use of a pair key: the key plus the sender's nonce counter.
/// Transferable between threads but not shareable for sending.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    key: Key256,
    role_pair: RolePair,
    direction: Direction,
    direction_id: [u8; 4],
    send_counter: u64,
    high_water: Option<u64>,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("role_pair", &self.role_pair)
            .field("direction", &self.direction)
            .field("send_counter", &self.send_counter)
            .finish_non_exhaustive()
    }
}

impl SessionKey {
    pub fn key(&self) -> &Key256 {
        &self.key
    }

    pub fn role_pair(&self) -> RolePair {
        self.role_pair
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Tag of the nonces this key sends with.
    pub fn direction_id(&self) -> [u8; 4] {
        self.direction_id
    }

    /// Tag of the nonces the peer sends with on the same pair.
    pub fn peer_direction_id(&self) -> [u8; 4] {
        let other = if self.direction == Direction::Forward { Direction::Reverse } else { Direction::Forward };
        direction_id(self.role_pair, other)
    }

    pub fn send_counter(&self) -> u64 {
        self.send_counter
    }

    /// Issues the next nonce. Counters only move forward; issuing a counter
    /// at or below one already issued is a hard failure.
    pub fn next_nonce(&mut self) -> Result<Nonce96, NonceError> {
        let c = self.send_counter;
        if c > MAX_MESSAGE_COUNTER {
            return Err(NonceError::Exhausted);
        }
        if self.high_water.is_some_and(|hw| c <= hw) {
            return Err(NonceError::Reused { counter: c });
        }
        self.high_water = Some(c);
        self.send_counter = c + 1;
        Ok(Nonce96::new(self.direction_id, c))
    }

    /// Moves the counter to an arbitrary value. This is a fault-injection
    /// hook: rewinding makes the next [`SessionKey::next_nonce`] fail.
    pub fn set_counter(&mut self, counter: u64) {
        self.send_counter = counter;
    }

    /// Plain GCM seal under the next nonce.
    pub fn seal(&mut self, aad: &[u8], pt: &[u8]) -> Result<(Nonce96, Vec<u8>, Tag128), NonceError> {
        let nonce = self.next_nonce()?;
        let (ct, tag) = crate::gcm::seal(&self.key, nonce, aad, pt);
        Ok((nonce, ct, tag))
    }
}

/// Derives the key for `transcript`'s pair as seen by the holder of `my`,
/// oriented for sending in `direction`. Both ends derive the same key bytes.
pub fn derive_session_key(
    my: &KeyPair,
    peer_public: &BigUint,
    transcript: &HandshakeTranscript,
    direction: Direction,
) -> Result<SessionKey, HandshakeError> {
    let group = my.group;
    let mine = group.encode(&my.public_element);
    let theirs = group.encode(peer_public);
    let consistent = transcript.group == group.name
        && ((transcript.public_a == mine && transcript.public_b == theirs)
            || (transcript.public_b == mine && transcript.public_a == theirs));
    if !consistent {
        return Err(HandshakeError::TranscriptMismatch);
    }
    let shared = group.encode(&my.shared_secret(peer_public)?);
    let salt = transcript.hash();
    let hk = Hkdf::<Sha256>::new(Some(&salt), &shared);
    let mut okm = [0u8; 32];
    let info = format!("ftrk session key {}", transcript.role_pair.label());
    hk.expand(info.as_bytes(), &mut okm).expect("32 bytes is a valid HKDF length");
    Ok(SessionKey {
        key: Key256::from_bytes(okm),
        role_pair: transcript.role_pair,
        direction,
        direction_id: direction_id(transcript.role_pair, direction),
        send_counter: 0,
        high_water: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Only user↔proxy and proxy↔accelerator keys exist.
    Baseline,
    /// Additionally the user and accelerator share a key.
    Direct,
}

/// A party taking part in key setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub role: Role,
    pub reachable: bool,
    pub attestation: Vec<u8>,
}

impl Participant {
    pub fn new(role: Role) -> Self {
        Self { role, reachable: true, attestation: format!("attestation-stub:{role}").into_bytes() }
    }

    pub fn unreachable(role: Role) -> Self {
        Self { reachable: false, ..Self::new(role) }
    }
}

/// The keys one role holds after setup, each oriented for sending.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<RolePair, SessionKey>,
}

impl KeyRing {
    pub fn get(&self, pair: RolePair) -> Option<&SessionKey> {
        self.keys.get(&pair)
    }

    pub fn get_mut(&mut self, pair: RolePair) -> Option<&mut SessionKey> {
        self.keys.get_mut(&pair)
    }

    pub fn pairs(&self) -> impl Iterator<Item = RolePair> + '_ {
        self.keys.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn insert(&mut self, k: SessionKey) {
        self.keys.insert(k.role_pair, k);
    }
}

#[derive(Debug, Clone)]
pub struct ThreePartyKeys {
    pub mode: ChannelMode,
    pub user: KeyRing,
    pub proxy: KeyRing,
    pub accel: KeyRing,
    pub transcripts: Vec<HandshakeTranscript>,
    /// Every handshake frame that passed through the proxy, byte for byte.
    pub proxy_observed: Vec<Vec<u8>>,
}

impl ThreePartyKeys {
    pub fn ring(&self, role: Role) -> &KeyRing {
        match role {
            Role::User => &self.user,
            Role::Proxy => &self.proxy,
            Role::Accelerator => &self.accel,
        }
    }
}

fn hello_frame(msg_type: MsgType, session_id: u64, public: Vec<u8>, attestation: &[u8]) -> Vec<u8> {
    let mut body = public;
    body.extend_from_slice(attestation);
    let total_len = body.len() as u64;
    encode_frame(&Frame {
        msg_type,
        session_id,
        batch_id: 0,
        reserved: 0,
        total_len,
        records: vec![ChainRecord { serial: 0, ct: body, tag: Tag128([0; 16]) }],
    })
}

fn read_hello(group: &DhGroup, bytes: &[u8], want: MsgType) -> Result<(u64, BigUint, Vec<u8>), HandshakeError> {
    let f = decode_frame(bytes, &FrameLimits::default()).map_err(|e| HandshakeError::Malformed(e.to_string()))?;
    if f.msg_type != want || f.records.len() != 1 {
        return Err(HandshakeError::Malformed(format!("expected a one-record {want:?} frame")));
    }
    let body = &f.records[0].ct;
    let w = group.element_bytes();
    if body.len() < w {
        return Err(HandshakeError::Malformed("body shorter than a group element".into()));
    }
    Ok((f.session_id, group.decode(&body[..w])?, body[w..].to_vec()))
}

/// Runs one pair exchange; `relay` sees every frame in flight.
fn exchange<R: RngCore + CryptoRng>(
    group: &'static DhGroup,
    pair: RolePair,
    a: &Participant,
    b: &Participant,
    rng: &mut R,
    mut relay: impl FnMut(&[u8]),
) -> Result<(SessionKey, SessionKey, HandshakeTranscript), HandshakeError> {
    for p in [a, b] {
        if !p.reachable {
            return Err(HandshakeError::HandshakeTimeout { role: p.role });
        }
    }
    let session_id = rng.next_u64();
    let kp_a = generate_keypair(group, rng);
    let hello = hello_frame(MsgType::Hello, session_id, kp_a.public_bytes(), &a.attestation);
    relay(&hello);
    let (sid, pub_a, att_a) = read_hello(group, &hello, MsgType::Hello)?;

    let kp_b = generate_keypair(group, rng);
    let reply = hello_frame(MsgType::Reply, sid, kp_b.public_bytes(), &b.attestation);
    relay(&reply);
    let (_, pub_b, att_b) = read_hello(group, &reply, MsgType::Reply)?;

    let mut attestation_stub = att_a;
    attestation_stub.extend_from_slice(&att_b);
    let transcript = HandshakeTranscript {
        group: group.name.to_string(),
        role_pair: pair,
        role_a: a.role,
        role_b: b.role,
        session_id: sid,
        public_a: group.encode(&pub_a),
        public_b: group.encode(&pub_b),
        attestation_stub,
    };
    let ka = derive_session_key(&kp_a, &pub_b, &transcript, Direction::Forward)?;
    let kb = derive_session_key(&kp_b, &pub_a, &transcript, Direction::Reverse)?;
    Ok((ka, kb, transcript))
}

/// Establishes the pair keys the topology calls for. Baseline mode sets up
/// user↔proxy and proxy↔accelerator; direct mode adds user↔accelerator,
/// whose messages the proxy relays without learning the key.
pub fn establish_three_party<R: RngCore + CryptoRng>(
    group: &'static DhGroup,
    mode: ChannelMode,
    user: &Participant,
    proxy: &Participant,
    accel: &Participant,
    rng: &mut R,
) -> Result<ThreePartyKeys, HandshakeError> {
    for (p, expected) in [(user, Role::User), (proxy, Role::Proxy), (accel, Role::Accelerator)] {
        if p.role != expected {
            return Err(HandshakeError::WrongRole { expected, got: p.role });
        }
    }
    let mut out = ThreePartyKeys {
        mode,
        user: KeyRing::default(),
        proxy: KeyRing::default(),
        accel: KeyRing::default(),
        transcripts: Vec::new(),
        proxy_observed: Vec::new(),
    };

    let (u, p, t) = exchange(group, RolePair::UserProxy, user, proxy, rng, |f| out.proxy_observed.push(f.to_vec()))?;
    out.user.insert(u);
    out.proxy.insert(p);
    out.transcripts.push(t);

    let (p, a, t) = exchange(group, RolePair::ProxyAccel, proxy, accel, rng, |f| out.proxy_observed.push(f.to_vec()))?;
    out.proxy.insert(p);
    out.accel.insert(a);
    out.transcripts.push(t);

    if mode == ChannelMode::Direct {
        if !proxy.reachable {
            return Err(HandshakeError::HandshakeTimeout { role: Role::Proxy });
        }
        let (u, a, t) =
            exchange(group, RolePair::UserAccel, user, accel, rng, |f| out.proxy_observed.push(f.to_vec()))?;
        out.user.insert(u);
        out.accel.insert(a);
        out.transcripts.push(t);
    }
    Ok(out)
}
