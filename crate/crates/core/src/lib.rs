//! Control-pulse design and exact single-excitation simulation for photon-mediated
//! quantum state transfer between two qubit-resonator nodes joined by a dispersive
//! waveguide.
//!
//! Everything is generic over the scalar type ([`Real`], implemented for `f32`
//! and `f64`); the `*64` aliases below are what most callers want.

pub mod error;
pub mod linkmodel;
pub mod numerics;
pub mod pulseshaper;
pub mod scalar;
pub mod scenario;
pub mod simulator;
pub mod wavepacket;

pub use error::{Error, Result};
pub use scalar::{Cx, Real};

pub type ModeGrid64 = linkmodel::ModeGrid<f64>;
pub type Dispersion64 = linkmodel::DispersionRelation<f64>;
pub type Link64 = linkmodel::Link<f64>;
pub type NodeCoupling64 = linkmodel::NodeCoupling<f64>;
pub type TimeGrid64 = wavepacket::TimeGrid<f64>;
pub type ControlPulse64 = pulseshaper::ControlPulse<f64>;
pub type EffectiveParams64 = pulseshaper::EffectiveModelParams<f64>;
pub type LinkSystem64 = simulator::LinkSystem<f64>;
pub type Trajectory64 = simulator::Trajectory<f64>;
