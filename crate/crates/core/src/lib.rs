//! Leak detection engine for domestic water meters.
//!
//! The crate is organised bottom-up:
//!
//! - [`metering`]: cumulative meter readings, per-interval flow, clock-anchored windows
//! - [`stats`]: per-window estimators and the upper critical value
//! - [`pattern`]: low / stable / mutable classification and the learning period
//! - [`md`]: maximum-deviation thresholds, composition and feedback tuning
//! - [`detect`]: the streaming detection engine and alert lifecycle
//! - [`sim`]: deterministic household consumption traces
//! - [`config`], [`report`], [`calibrate`]: operator plumbing

pub mod calibrate;
pub mod config;
pub mod detect;
pub mod md;
pub mod metering;
pub mod pattern;
pub mod report;
pub mod sim;
pub mod stats;

pub use config::EngineConfig;
pub use detect::engine::Engine;
pub use metering::{DayWindow, FlowEntry, FlowSample, MeterSample};
