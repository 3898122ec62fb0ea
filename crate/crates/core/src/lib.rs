pub mod capture;
pub mod config;
pub mod codec;
pub mod commands;
pub mod registry;
pub mod session;
pub mod tier;
pub mod estimator;
pub mod synth;
