//! Duplex voice-interaction engine.
//!
//! Two model slots cooperate: one answers the current query while the other
//! monitors incoming audio. Every input is tagged with a state token (`<1>`
//! spoken query, `<2>` noise, `<3>` typed query). Noise is suppressed without
//! disturbing the running answer; a new query interrupts the answer, the
//! partial output is folded into the history and the two slots swap roles.
//!
//! The crate also carries the media token arithmetic and the training data
//! preparation utilities (sequence packing, noise-corpus sampling).

pub mod backend;
pub mod clock;
pub mod config;
pub mod conversation;
pub mod media;
pub mod packer;
pub mod pcm;
pub mod protocol;
pub mod scenario;
pub mod scheduler;
pub mod session;
pub mod vad;
