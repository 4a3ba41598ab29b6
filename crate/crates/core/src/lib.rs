//! Estimation of a TDMA mesh network's link states from end-to-end packet
//! deliveries, joint prediction of future deliveries, and delivery-aware
//! finite-horizon LQG control, with a Monte-Carlo harness to compare the
//! delivery-optimized controller against i.i.d. and always-on baselines.

pub mod config;
pub mod controller;
pub mod estimator;
pub mod harness;
pub mod link;
pub mod mesh;
pub mod plant;
pub mod rng;
