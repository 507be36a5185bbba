//! Multi-dimensional attention for leaky integrate-and-fire spiking networks.
//!
//! The crate covers the whole desk-scale pipeline: event streams to frames,
//! LIF layers with temporal/channel/spatial attention over membrane
//! potentials, membrane-shortcut residual blocks, surrogate-gradient BPTT,
//! energy accounting, an empirical block-dynamical-isometry checker, and
//! average spiking response visualization.

pub mod asrv_viz;
pub mod attention;
pub mod autograd;
pub mod config;
pub mod energy;
pub mod error;
pub mod event_ingest;
pub mod isometry;
pub mod kernels;
pub mod network;
pub mod params;
pub mod residual;
pub mod snn_core;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
