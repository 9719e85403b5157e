//! Library for studying class-imbalanced multi-domain classification on
//! small trainable networks.
//!
//! The crate bundles a deterministic numeric substrate, a synthetic
//! multi-domain benchmark generator with on-disk CSV datasets, a small MLP
//! with exact manual backpropagation, the calibrated domain-class alignment
//! objective with ERM and CORAL baselines, leave-one-domain-out evaluation
//! with stratified k-fold cross-validation, and F1-based reporting.
//!
//! Every run is a pure function of its inputs and seed: the random stream,
//! batch order, and split assignments are all counter-based and frozen, so
//! artifacts regenerate byte-identically.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
