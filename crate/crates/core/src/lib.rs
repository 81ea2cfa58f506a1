//! Secure IO path for accelerator TEEs: AES-256-GCM with split-phase
//! decryption, multi-chain authentication, a direct client-to-accelerator
//! channel and a pipeline model of the resulting transfer costs.

pub mod bench;
pub mod cavp;
pub mod chain;
pub mod channel;
pub mod gcm;
pub mod handshake;
pub mod pipeline;
