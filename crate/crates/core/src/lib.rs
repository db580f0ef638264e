//! Desk-scale implementation of a unified multimodal autoregressive
//! mixture-of-experts model's mechanisms: heterogeneous attention masks,
//! spatiotemporal rotary positions, auxiliary-loss-free routing, elastic
//! sub-networks, next-frame-and-scale visual sequences, next-codec audio
//! prediction, RL stabilization objectives and rollout scheduling.

pub mod audio;
pub mod elastic;
pub mod harness;
pub mod kernel;
pub mod maskgen;
pub mod model;
pub mod moe;
pub mod rlopt;
pub mod sequence;
pub mod unirope;
pub mod vision;
