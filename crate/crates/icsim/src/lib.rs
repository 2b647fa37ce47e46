//! Deterministic simulator for noise-resilient multiparty interactive coding.
//!
//! The library converts a fixed-order noiseless protocol over an arbitrary
//! connected network into a noise-resilient one and runs it, round by round,
//! against pluggable insertion/deletion/substitution adversaries. Three scheme
//! variants are provided: shared randomness with oblivious noise (A), private
//! randomness exchanged over the network with adaptive noise (B), and shared
//! randomness with a seed-efficient double hash (C). An omniscient observer
//! tracks a potential function over all per-link transcripts, which the test
//! suite uses as a live oracle for progress invariants.

pub mod channel;
pub mod ecc;
pub mod gf2;
pub mod hashing;
pub mod instrument;
pub mod protocol_model;
pub mod scheme;
pub mod topology;
