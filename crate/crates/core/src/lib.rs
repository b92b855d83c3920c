//! Simulator for CSI-free over-the-air federated learning.
//!
//! Devices run local SGD, compress their model differences with a shared
//! random sign dither plus error-feedback memory, and transmit the
//! non-negative result as subcarrier amplitudes. The server never learns
//! the fading: it estimates the sum of transmitted powers with a
//! square-law detector and restores signs from the dither. Coherent
//! baselines (ideal averaging and truncated channel inversion, with and
//! without memory) run on the same data, selections and link budgets.

pub mod bound;
pub mod channel;
pub mod data;
pub mod dither;
pub mod exec;
pub mod harness;
pub mod model;
pub mod rng;
pub mod schemes;

pub use exec::Exec;
pub use harness::HarnessError as Error;
