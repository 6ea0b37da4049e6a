//! Neuro-symbolic rule-list classification for radar hand gestures.
//!
//! This crate trains a rule-list network by gradient descent and extracts an
//! ordered symbolic IF-THEN rule list that is exactly faithful to the
//! discretized network. The pipeline is end to end:
//!
//! 1. [`radar`] synthesizes FMCW radar recordings of hand-gesture
//!    trajectories and runs a range/Doppler/angle DSP chain to produce five
//!    per-gesture features (range, Doppler velocity, azimuth, elevation,
//!    magnitude).
//! 2. [`binarizer`] turns continuous features into binary threshold
//!    indicators and keeps the metadata needed to render symbolic conditions.
//! 3. [`model`] is the differentiable network: a rule layer with
//!    hard-concrete gated ternary weights, batch normalization, a
//!    straight-through binarized activation, a fixed first-match hierarchy
//!    and a softmax output.
//! 4. [`trainer`] optimizes the network with Adam under a cross-entropy +
//!    sparsity objective, supports user-specific transfer learning with
//!    selective freezing, and logs per-epoch complexity diagnostics.
//! 5. [`rules`] converts a trained network into an ordered [`rules::RuleList`],
//!    evaluates it as a standalone interpreter and verifies network/rule-list
//!    fidelity.
//! 6. [`metrics`] provides the classification metrics shared by training and
//!    reporting.
//!
//! Model persistence lives in [`modelfile`]; the feature CSV schema shared by
//! every stage lives in [`data`].

pub mod binarizer;
pub mod data;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod radar;
pub mod rules;
pub mod trainer;

pub use binarizer::{BinarizationScheme, BinarizedDataset, Condition, Polarity};
pub use model::{ForwardTrace, HardConcreteGate, RuleNetParams};
pub use rules::{Rule, RuleList};
pub use trainer::{EpochDiagnostics, FreezeSpec, TrainConfig};
