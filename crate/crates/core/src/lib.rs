//! UAV air-to-ground rate adaptation: flight and channel simulation, PHY
//! link model, a from-scratch CNN/LSTM learning engine, the state-aware
//! rate predictor with online fine-tuning, baseline adapters and the
//! experiment harness.

// `!(x > 0.0)` deliberately rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod channel;
pub mod error;
pub mod flightsim;
pub mod harness;
pub mod nn;
pub mod phy;
pub mod staterate;
pub mod sync;

pub use channel::{ChannelState, EnvironmentSpec, FadingState};
pub use error::{Error, Result};
pub use flightsim::{FlightState, TrajectorySpec};
pub use phy::{McsIndex, Phy, PhyConfig, TransmissionRecord};
pub use staterate::RateDistribution;
