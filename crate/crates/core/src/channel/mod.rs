//! Wire framing, transports and the three-role flows with an injectable
//! on-path adversary.

pub mod flow;
pub mod frame;
pub mod transport;

pub use flow::{
    inject_adversary, run_baseline_flow, run_direct_flow, Adversary, AdversaryAction, AdversaryKind, FlowError,
    FlowMode, FlowOptions, FlowOutcome, FlowTranscript, FrameSelector, Hop, Preprocessing, Rejection, Session,
    StageEvent, Transport,
};
pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameLimits, MsgType};
