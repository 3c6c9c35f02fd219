//! Defect detection and closed-loop control for laser powder bed fusion at desk scale.
//!
//! The crate is organised along the data path of the monitoring loop:
//!
//! * [`datagen`] synthesises annotated defect images, preprocesses and augments them.
//! * [`cnn`] is a small from-scratch tensor engine with the classifier, its trainer
//!   and a finite-difference gradient checker.
//! * [`quant`] converts a trained network to int8, prunes it and benchmarks latency.
//! * [`telemetry`] holds the compact defect-record codec and an MQTT 3.1.1 subset
//!   broker and client.
//! * [`twin`] is a reduced-order process model plus the feedback controller.
//! * [`metrics`] implements the evaluation formulas and report rendering.

pub mod cnn;
pub mod datagen;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod telemetry;
pub mod tensor;
pub mod twin;

pub use tensor::{Precision, Real, Tensor};
