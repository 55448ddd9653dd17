//! Car-following control with a model-predictive controller whose weights, horizon and
//! targets are chosen by a slow outer planner (a language model or a calibrated memory).

pub mod cassette;
pub mod dynamics;
pub mod environment;
pub mod io;
pub mod mpc;
pub mod scenario;
pub mod transport;
pub mod memory;
pub mod planner;
pub mod simulator;
pub mod metrics;
pub mod suite;
pub mod config;
pub mod cli;
