//! The two three-role execution flows and the adversary that sits on the
//! wire between them.
//!
//! Baseline: the user seals for the proxy, the proxy decrypts, verifies,
//! re-encrypts and MACs for the accelerator, which decrypts and verifies.
//! Direct: the user seals a multi-chain envelope for the accelerator and the
//! proxy forwards the frame bytes untouched.
//!
//! Every role is a sequential actor; frames pass through ordered links and
//! adversary actions are applied by per-hop sequence number, so runs are
//! reproducible. Security rejections end the flow with an ABORT recorded in
//! the transcript; only transport and local key-state problems are errors.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::frame::{decode_frame, encode_frame, Frame, FrameLimits, MsgType};
use super::transport::{Link, MemoryLink, TcpLink, TransportError};
use crate::chain::{ChainCodec, ChainPolicy, ChainRecord, ChainedEnvelope, Lanes, MAX_MESSAGE_COUNTER};
use crate::gcm::{xor_finalize, Aes256Gcm, Nonce96, BLOCK};
use crate::handshake::{KeyRing, NonceError, Role, RolePair, ThreePartyKeys};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Baseline,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hop {
    UserToProxy,
    ProxyToAccel,
}

impl Hop {
    fn index(self) -> usize {
        match self {
            Hop::UserToProxy => 0,
            Hop::ProxyToAccel => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversaryKind {
    /// Flips bit `bit % 8` of byte `bit / 8` of the frame.
    FlipBit {
        bit: u64,
    },
    /// Exchanges two chain records, serials and all.
    SwapChains {
        i: u8,
        j: u8,
    },
    /// Substitutes an earlier frame with this batch id seen on the same hop.
    Replay {
        batch_id: u64,
    },
    Drop,
    None,
}

/// Which frames an action applies to; `None` fields match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameSelector {
    pub hop: Option<Hop>,
    /// Zero-based index of the DATA frame on that hop within the session.
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryAction {
    pub kind: AdversaryKind,
    pub target: FrameSelector,
}

impl AdversaryAction {
    pub fn on(kind: AdversaryKind, hop: Hop, seq: u64) -> Self {
        Self { kind, target: FrameSelector { hop: Some(hop), seq: Some(seq) } }
    }
}

/// Mutates bytes in flight; never touches endpoint state.
#[derive(Debug, Clone, Default)]
pub struct Adversary {
    actions: Vec<AdversaryAction>,
    seen: [u64; 2],
    captured: Vec<(Hop, u64, Vec<u8>)>,
}

impl Adversary {
    pub fn new(actions: Vec<AdversaryAction>) -> Self {
        Self { actions, ..Self::default() }
    }

    /// Applies every matching action to one frame; returns the bytes that
    /// continue on the wire and a note per action that changed something.
    fn intercept(&mut self, hop: Hop, bytes: Vec<u8>, limits: &FrameLimits) -> (Option<Vec<u8>>, Vec<String>) {
        let seq = self.seen[hop.index()];
        self.seen[hop.index()] += 1;
        if let Ok(f) = decode_frame(&bytes, limits) {
            self.captured.push((hop, f.batch_id, bytes.clone()));
        }
        let mut out = Some(bytes);
        let mut notes = Vec::new();
        for a in &self.actions {
            let t = a.target;
            if t.hop.is_some_and(|h| h != hop) || t.seq.is_some_and(|s| s != seq) {
                continue;
            }
            let Some(cur) = out.as_mut() else { break };
            match a.kind {
                AdversaryKind::None => {}
                AdversaryKind::Drop => {
                    out = None;
                    notes.push(format!("{hop:?}#{seq}: dropped"));
                }
                AdversaryKind::FlipBit { bit } => {
                    if let Some(b) = cur.get_mut((bit / 8) as usize) {
                        *b ^= 1 << (bit % 8);
                        notes.push(format!("{hop:?}#{seq}: flipped bit {bit}"));
                    }
                }
                AdversaryKind::SwapChains { i, j } => {
                    if let Ok(mut f) = decode_frame(cur, limits) {
                        let (i, j) = (usize::from(i), usize::from(j));
                        if i < f.records.len() && j < f.records.len() && i != j {
                            f.records.swap(i, j);
                            *cur = encode_frame(&f);
                            notes.push(format!("{hop:?}#{seq}: swapped chains {i} and {j}"));
                        }
                    }
                }
                AdversaryKind::Replay { batch_id } => {
                    let old = self.captured.iter().find(|(h, b, _)| *h == hop && *b == batch_id).map(|c| c.2.clone());
                    if let Some(old) = old.filter(|o| o != cur) {
                        *cur = old;
                        notes.push(format!("{hop:?}#{seq}: replayed batch {batch_id}"));
                    }
                }
            }
        }
        (out, notes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    /// `None` for bytes in flight between roles.
    pub role: Option<Role>,
    pub stage: String,
    pub bytes: u64,
    /// Logical duration in 16-byte block operations.
    pub units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exposure {
    pub role: Role,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    Timeout,
    Malformed { detail: String },
    WrongSession { got: u64 },
    Replay { batch_id: u64, last_accepted: u64 },
    ReorderDetected { detail: String },
    AuthFailure { detail: String },
}

impl Rejection {
    fn from_chain(e: crate::chain::ChainError) -> Self {
        match e {
            crate::chain::ChainError::ReorderDetected { .. } => Rejection::ReorderDetected { detail: e.to_string() },
            _ => Rejection::AuthFailure { detail: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FlowOutcome {
    Delivered,
    Aborted { role: Role, reason: Rejection },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTranscript {
    pub mode: FlowMode,
    pub session_id: u64,
    pub events: Vec<StageEvent>,
    /// Every role that held plaintext during the flow.
    pub exposure: Vec<Exposure>,
    pub adversary: Vec<String>,
    pub outcome: FlowOutcome,
    /// What the accelerator released, present only on delivery.
    #[serde(skip)]
    pub delivered: Option<Vec<u8>>,
}

impl FlowTranscript {
    fn new(mode: FlowMode, session_id: u64) -> Self {
        Self {
            mode,
            session_id,
            events: Vec::new(),
            exposure: Vec::new(),
            adversary: Vec::new(),
            outcome: FlowOutcome::Delivered,
            delivered: None,
        }
    }

    fn event(&mut self, role: Role, stage: &str, bytes: usize) {
        self.events.push(StageEvent {
            role: Some(role),
            stage: format!("{}.{stage}", role.name()),
            bytes: bytes as u64,
            units: bytes.div_ceil(BLOCK) as u64,
        });
    }

    fn wire(&mut self, bytes: usize) {
        self.events.push(StageEvent {
            role: None,
            stage: "wire".into(),
            bytes: bytes as u64,
            units: bytes.div_ceil(BLOCK) as u64,
        });
    }

    fn expose(&mut self, role: Role, bytes: usize) {
        match self.exposure.iter_mut().find(|e| e.role == role) {
            Some(e) => e.bytes += bytes as u64,
            None => self.exposure.push(Exposure { role, bytes: bytes as u64 }),
        }
    }

    fn abort(mut self, role: Role, reason: Rejection) -> Self {
        self.events.push(StageEvent { role: Some(role), stage: "abort".into(), bytes: 0, units: 0 });
        self.outcome = FlowOutcome::Aborted { role, reason };
        self
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.stage.as_str()).collect()
    }

    pub fn exposed(&self, role: Role) -> bool {
        self.exposure.iter().any(|e| e.role == role)
    }

    pub fn aborted(&self) -> bool {
        matches!(self.outcome, FlowOutcome::Aborted { .. })
    }

    pub fn wire_bytes(&self) -> u64 {
        self.events.iter().filter(|e| e.stage == "wire").map(|e| e.bytes).sum()
    }

    /// Text dump, one event per line.
    pub fn render(&self) -> String {
        let mut s = format!("flow {:?} session {:016x}\n", self.mode, self.session_id);
        for e in &self.events {
            s += &format!("  {:<18} {:>10} bytes {:>8} units\n", e.stage, e.bytes, e.units);
        }
        for a in &self.adversary {
            s += &format!("  adversary: {a}\n");
        }
        let roles: Vec<String> = self.exposure.iter().map(|e| format!("{}({} bytes)", e.role, e.bytes)).collect();
        s += &format!("  plaintext exposure: {}\n", if roles.is_empty() { "none".into() } else { roles.join(", ") });
        match &self.outcome {
            FlowOutcome::Delivered => s += "  outcome: delivered\n",
            FlowOutcome::Aborted { role, reason } => s += &format!("  outcome: ABORT at {role}: {reason:?}\n"),
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("no {0:?} key at this endpoint; run the handshake in direct mode first")]
    MissingKey(RolePair),
    #[error(transparent)]
    Nonce(#[from] NonceError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Accelerator-side preprocessing (e.g. decoding compressed inputs), which
/// lets the wire carry the compact form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Decoded bytes per wire byte.
    pub compression_ratio: f64,
    /// Extra accelerator work per decoded 16-byte block.
    pub units_per_block: u64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { compression_ratio: 5.0, units_per_block: 1 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlowOptions {
    pub lanes: Lanes,
    pub limits: FrameLimits,
    pub preprocessing: Option<Preprocessing>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// One loopback listener per hop.
    Tcp {
        user_to_proxy: SocketAddr,
        proxy_to_accel: SocketAddr,
        timeout: Duration,
    },
}

struct Endpoint {
    ring: KeyRing,
    /// Highest batch id accepted per pair.
    accepted: BTreeMap<RolePair, u64>,
}

impl Endpoint {
    fn new(ring: KeyRing) -> Self {
        Self { ring, accepted: BTreeMap::new() }
    }

    fn key(&mut self, pair: RolePair) -> Result<&mut crate::handshake::SessionKey, FlowError> {
        self.ring.get_mut(pair).ok_or(FlowError::MissingKey(pair))
    }

    /// Frame checks that need no key: type, session and batch freshness.
    fn admit(
        &self,
        bytes: Option<Vec<u8>>,
        session_id: u64,
        pair: RolePair,
        limits: &FrameLimits,
    ) -> Result<Frame, Rejection> {
        let bytes = bytes.ok_or(Rejection::Timeout)?;
        let f = decode_frame(&bytes, limits).map_err(|e| Rejection::Malformed { detail: e.to_string() })?;
        if f.msg_type != MsgType::Data {
            return Err(Rejection::Malformed { detail: format!("expected DATA, got {:?}", f.msg_type) });
        }
        if f.session_id != session_id {
            return Err(Rejection::WrongSession { got: f.session_id });
        }
        if f.batch_id > MAX_MESSAGE_COUNTER {
            return Err(Rejection::Malformed { detail: format!("batch id {} outside the counter space", f.batch_id) });
        }
        if let Some(&last) = self.accepted.get(&pair) {
            if f.batch_id <= last {
                return Err(Rejection::Replay { batch_id: f.batch_id, last_accepted: last });
            }
        }
        Ok(f)
    }

    fn envelope(&mut self, f: Frame, pair: RolePair) -> Result<ChainedEnvelope, FlowError> {
        let peer = self.key(pair)?.peer_direction_id();
        Ok(ChainedEnvelope { base_nonce: Nonce96::new(peer, f.batch_id), records: f.records, total_len: f.total_len })
    }
}

fn data_frame(session_id: u64, env: ChainedEnvelope) -> Frame {
    Frame {
        msg_type: MsgType::Data,
        session_id,
        batch_id: env.base_nonce.counter,
        reserved: 0,
        total_len: env.total_len,
        records: env.records,
    }
}

/// Three endpoints, two hops and whatever sits on the wire.
pub struct Session {
    id: u64,
    user: Endpoint,
    proxy: Endpoint,
    accel: Endpoint,
    links: [Box<dyn Link>; 2],
    adversary: Adversary,
    options: FlowOptions,
}

impl Session {
    pub fn new(
        session_id: u64,
        keys: ThreePartyKeys,
        transport: &Transport,
        options: FlowOptions,
    ) -> Result<Self, FlowError> {
        let links: [Box<dyn Link>; 2] = match transport {
            Transport::InProcess => [Box::<MemoryLink>::default(), Box::<MemoryLink>::default()],
            Transport::Tcp { user_to_proxy, proxy_to_accel, timeout } => [
                Box::new(TcpLink::bind(*user_to_proxy, *timeout)?),
                Box::new(TcpLink::bind(*proxy_to_accel, *timeout)?),
            ],
        };
        Ok(Self {
            id: session_id,
            user: Endpoint::new(keys.user),
            proxy: Endpoint::new(keys.proxy),
            accel: Endpoint::new(keys.accel),
            links,
            adversary: Adversary::default(),
            options,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn transport_kind(&self) -> &'static str {
        self.links[0].kind()
    }

    pub fn set_adversary(&mut self, actions: Vec<AdversaryAction>) {
        self.adversary = Adversary::new(actions);
    }

    pub fn holds_key(&self, role: Role, pair: RolePair) -> bool {
        let ep = match role {
            Role::User => &self.user,
            Role::Proxy => &self.proxy,
            Role::Accelerator => &self.accel,
        };
        ep.ring.get(pair).is_some()
    }

    fn send(&mut self, hop: Hop, frame: &Frame, t: &mut FlowTranscript) -> Result<Option<Vec<u8>>, FlowError> {
        let bytes = encode_frame(frame);
        t.wire(bytes.len());
        let (bytes, notes) = self.adversary.intercept(hop, bytes, &self.options.limits);
        t.adversary.extend(notes);
        Ok(self.links[hop.index()].carry(bytes)?)
    }

    fn codec(&self, key: &crate::handshake::SessionKey, policy: ChainPolicy) -> ChainCodec {
        ChainCodec::new(Aes256Gcm::new(key.key()), policy, self.options.lanes)
    }

    /// Receiver side of one hop: admit, decrypt, verify. Returns the
    /// plaintext, or the finished (aborted) transcript.
    fn receive(
        &mut self,
        role: Role,
        pair: RolePair,
        bytes: Option<Vec<u8>>,
        policy: ChainPolicy,
        mut t: FlowTranscript,
    ) -> Result<Result<(Vec<u8>, FlowTranscript), FlowTranscript>, FlowError> {
        let limits = self.options.limits;
        let ep = if role == Role::Proxy { &mut self.proxy } else { &mut self.accel };
        let frame = match ep.admit(bytes, self.id, pair, &limits) {
            Ok(f) => f,
            Err(r) => return Ok(Err(t.abort(role, r))),
        };
        let batch_id = frame.batch_id;
        let env = ep.envelope(frame, pair)?;
        let key = ep.key(pair)?.clone();
        let codec = self.codec(&key, policy);
        let pt = match codec.decrypt_unverified(&env) {
            Ok(pt) => pt,
            Err(e) => return Ok(Err(t.abort(role, Rejection::from_chain(e)))),
        };
        t.event(role, "dec", pt.len());
        t.expose(role, pt.len());
        t.event(role, "auth", pt.len());
        if let Err(e) = codec.verify(&env) {
            return Ok(Err(t.abort(role, Rejection::from_chain(e))));
        }
        let ep = if role == Role::Proxy { &mut self.proxy } else { &mut self.accel };
        ep.accepted.insert(pair, batch_id);
        Ok(Ok((pt, t)))
    }

    fn deliver(&self, pt: Vec<u8>, mut t: FlowTranscript) -> FlowTranscript {
        if let Some(p) = self.options.preprocessing {
            let decoded = (pt.len() as f64 * p.compression_ratio).round() as u64;
            t.events.push(StageEvent {
                role: Some(Role::Accelerator),
                stage: "accel.preprocess".into(),
                bytes: decoded,
                units: decoded.div_ceil(BLOCK as u64) * p.units_per_block,
            });
        }
        t.delivered = Some(pt);
        t
    }

    /// User → proxy (decrypt, verify, re-encrypt, MAC) → accelerator.
    pub fn run_baseline(&mut self, batch_pt: &[u8]) -> Result<FlowTranscript, FlowError> {
        let mut t = FlowTranscript::new(FlowMode::Baseline, self.id);
        let single = ChainPolicy::single();
        t.expose(Role::User, batch_pt.len());

        let up = self.user.key(RolePair::UserProxy)?;
        let nonce = up.next_nonce()?;
        let up = up.clone();
        let env = self.codec(&up, single).seal(nonce, batch_pt);
        t.event(Role::User, "enc", batch_pt.len());
        let arrived = self.send(Hop::UserToProxy, &data_frame(self.id, env), &mut t)?;

        let (pt, mut t) = match self.receive(Role::Proxy, RolePair::UserProxy, arrived, single, t)? {
            Ok(v) => v,
            Err(t) => return Ok(t),
        };

        // Re-seal for the accelerator as one chain, encryption and MAC as
        // separate passes.
        let pa = self.proxy.key(RolePair::ProxyAccel)?;
        let nonce = pa.next_nonce()?;
        let cipher = Aes256Gcm::new(pa.key());
        let ks = cipher.keystream(nonce, pt.len().div_ceil(BLOCK));
        let ct = xor_finalize(&ks, &pt).expect("keystream sized to payload");
        t.event(Role::Proxy, "enc", pt.len());
        let tag = cipher.compute_tag(nonce, &[0], &ct);
        t.event(Role::Proxy, "mac", ct.len());
        let env = ChainedEnvelope {
            base_nonce: nonce,
            records: vec![ChainRecord { serial: 0, ct, tag }],
            total_len: pt.len() as u64,
        };
        let arrived = self.send(Hop::ProxyToAccel, &data_frame(self.id, env), &mut t)?;

        Ok(match self.receive(Role::Accelerator, RolePair::ProxyAccel, arrived, single, t)? {
            Ok((pt, t)) => self.deliver(pt, t),
            Err(t) => t,
        })
    }

    /// User → (proxy forwards bytes) → accelerator, multi-chain sealed.
    pub fn run_direct(&mut self, batch_pt: &[u8], policy: ChainPolicy) -> Result<FlowTranscript, FlowError> {
        let mut t = FlowTranscript::new(FlowMode::Direct, self.id);
        // Refuse before doing anything if either end lacks the shared key.
        self.accel.key(RolePair::UserAccel)?;
        let ua = self.user.key(RolePair::UserAccel)?;
        let nonce = ua.next_nonce()?;
        let ua = ua.clone();
        t.expose(Role::User, batch_pt.len());
        let env = self.codec(&ua, policy).seal(nonce, batch_pt);
        t.event(Role::User, "enc", batch_pt.len());
        let frame = data_frame(self.id, env);

        let at_proxy = self.send(Hop::UserToProxy, &frame, &mut t)?;
        let Some(bytes) = at_proxy else {
            return Ok(t.abort(Role::Proxy, Rejection::Timeout));
        };
        t.event(Role::Proxy, "forward", bytes.len());
        let wire_len = bytes.len();
        t.wire(wire_len);
        let (bytes, notes) = self.adversary.intercept(Hop::ProxyToAccel, bytes, &self.options.limits);
        t.adversary.extend(notes);
        let arrived = self.links[Hop::ProxyToAccel.index()].carry(bytes)?;

        Ok(match self.receive(Role::Accelerator, RolePair::UserAccel, arrived, policy, t)? {
            Ok((pt, t)) => self.deliver(pt, t),
            Err(t) => t,
        })
    }
}

pub fn run_baseline_flow(session: &mut Session, batch_pt: &[u8]) -> Result<FlowTranscript, FlowError> {
    session.run_baseline(batch_pt)
}

pub fn run_direct_flow(
    session: &mut Session,
    batch_pt: &[u8],
    policy: ChainPolicy,
) -> Result<FlowTranscript, FlowError> {
    session.run_direct(batch_pt, policy)
}

/// Runs one flow with `actions` installed on the wire.
pub fn inject_adversary(
    session: &mut Session,
    mode: FlowMode,
    batch_pt: &[u8],
    policy: ChainPolicy,
    actions: Vec<AdversaryAction>,
) -> Result<FlowTranscript, FlowError> {
    let previous = std::mem::take(&mut session.adversary);
    // Keep captured history so replays can reach frames from earlier flows.
    session.adversary = Adversary { actions, ..previous };
    match mode {
        FlowMode::Baseline => session.run_baseline(batch_pt),
        FlowMode::Direct => session.run_direct(batch_pt, policy),
    }
}
