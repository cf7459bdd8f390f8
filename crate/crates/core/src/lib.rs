//! Link-level simulator for the downlink of a multi-cell massive MIMO
//! network, together with estimators of the effective downlink channel gain
//! that a user needs for coherent detection.
//!
//! The crate covers the full chain: static network construction with
//! wrap-around geometry and spatially correlated (or i.i.d.) Rayleigh fading,
//! uplink pilot training with MMSE channel estimation under pilot
//! contamination, maximum-ratio and zero-forcing precoding with average-norm
//! normalization, downlink data transmission, four gain estimators
//! (hardening mean, model-aided blind, asymptotic oracle, and a small
//! from-scratch MLP), and NMSE / ergodic spectral-efficiency metrics with an
//! experiment harness that is reproducible for any thread count.

pub mod downlink;
pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod precoding;
pub mod rng;
pub mod scenario;
pub mod uplink;
