//! Modular control framework for trapped-ion experiments, with a simulated
//! real-time core device and a single-qubit physics model.

pub mod devices;
pub mod experiment;
pub mod fit;
pub mod framework;
pub mod physics;
pub mod rb;
pub mod rtio;
pub mod system;
