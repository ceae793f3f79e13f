//! Identify opt-in UWB tag carriers among camera pedestrian tracklets.
//!
//! Tag positions are filtered with an NLoS-aware unscented Kalman filter,
//! matched against ground-plane tracklets through a constrained linear
//! assignment, and everyone left unmatched is masked out of the frame.

pub mod geometry;
pub mod nlos;
pub mod tracking;
pub mod optimize;
pub mod matching;
pub mod simulator;
pub mod calibration;
pub mod pipeline;
